use super::*;
use crate::audio::write_wav_pcm16;
use crate::autodiff::Graph;
use crate::labels::Split;
use crate::tensor::Tensor;
use crate::training::{loss, Prediction};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn naive_mse(p: &[f64], t: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p[i] - t[i]) * (p[i] - t[i]);
    }
    s / p.len() as f64
}

/// cov / (sd sd) through raw moments.
fn naive_lcc(p: &[f64], t: &[f64]) -> f64 {
    let n = p.len() as f64;
    let e = |f: &dyn Fn(usize) -> f64| (0..p.len()).map(f).sum::<f64>() / n;
    let (mp, mt) = (e(&|i| p[i]), e(&|i| t[i]));
    let cov = e(&|i| (p[i] - mp) * (t[i] - mt));
    let vp = e(&|i| (p[i] - mp).powi(2));
    let vt = e(&|i| (t[i] - mt).powi(2));
    cov / (vp * vt).sqrt()
}

/// Rank = 1 + number of smaller values + half the number of other equal
/// values.
fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|a| {
            let less = x.iter().filter(|b| *b < a).count() as f64;
            let equal = x.iter().filter(|b| *b == a).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, ties: bool) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if ties {
                rng.random_range(0..8) as f64
            } else {
                rng.random_range(-1.0..1.0)
            }
        })
        .collect()
}

#[test]
fn mse_examples() {
    assert_eq!(mse(&[0.2, 0.4], &[0.2, 0.4]).unwrap(), 0.0);
    assert_eq!(mse(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
    assert!(mse(&[], &[]).is_err());
    assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn correlation_examples() {
    let p = [0.1, 0.5, 0.3, 0.9, 0.7];
    let affine: Vec<f64> = p.iter().map(|x| 2.0 * x + 3.0).collect();
    assert!((lcc(&p, &affine).unwrap() - 1.0).abs() < 1e-15);
    let neg: Vec<f64> = p.iter().map(|x| -x).collect();
    assert!((lcc(&p, &neg).unwrap() + 1.0).abs() < 1e-15);
    let cubed: Vec<f64> = p.iter().map(|x| x.powi(3) + 10.0).collect();
    assert!((srcc(&p, &cubed).unwrap() - 1.0).abs() < 1e-15);
    let rev: Vec<f64> = p.iter().map(|x| 1.0 - x).collect();
    assert!((srcc(&p, &rev).unwrap() + 1.0).abs() < 1e-15);
    let ties = srcc(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
    let oracle = naive_lcc(&[1.0, 2.5, 2.5, 4.0], &[1.0, 3.0, 2.0, 4.0]);
    assert!((ties - oracle).abs() < 1e-12);
}

#[test]
fn constant_inputs_are_errors_not_nan() {
    assert!(matches!(
        lcc(&[0.5; 4], &[0.1, 0.2, 0.3, 0.4]),
        Err(Error::Degenerate(_))
    ));
    assert!(matches!(
        srcc(&[0.1, 0.2, 0.3], &[1.0; 3]),
        Err(Error::Degenerate(_))
    ));
    assert!(lcc(&[0.5], &[0.5]).is_err());
}

#[test]
fn metrics_match_brute_force_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..100 {
        let ties = case % 2 == 0;
        let p = random_vec(&mut rng, 100, ties);
        let t = random_vec(&mut rng, 100, ties);
        assert!((mse(&p, &t).unwrap() - naive_mse(&p, &t)).abs() < 1e-12);
        assert!((lcc(&p, &t).unwrap() - naive_lcc(&p, &t)).abs() < 1e-12);
        assert_eq!(fractional_ranks(&p), brute_ranks(&p));
        let s = naive_lcc(&brute_ranks(&p), &brute_ranks(&t));
        assert!((srcc(&p, &t).unwrap() - s).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn srcc_is_invariant_under_increasing_maps(
        p in prop::collection::vec(-5.0f64..5.0, 3..40),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Vec<f64> = p.iter().map(|x| x + rng.random_range(-2.0..2.0)).collect();
        prop_assume!(lcc(&p, &t).is_ok());
        let fp: Vec<f64> = p.iter().map(|x| x.exp()).collect();
        let gt: Vec<f64> = t.iter().map(|x| x.powi(3) - 7.0).collect();
        prop_assert_eq!(srcc(&p, &t).unwrap(), srcc(&fp, &gt).unwrap());
    }

    #[test]
    fn correlations_are_symmetric_and_bounded(
        p in prop::collection::vec(-5.0f64..5.0, 3..40),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Vec<f64> = p.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        prop_assume!(lcc(&p, &t).is_ok());
        let (a, b) = (lcc(&p, &t).unwrap(), lcc(&t, &p).unwrap());
        prop_assert!((a - b).abs() < 1e-12 && a.abs() <= 1.0);
        let (a, b) = (srcc(&p, &t).unwrap(), srcc(&t, &p).unwrap());
        prop_assert!((a - b).abs() < 1e-12 && a.abs() <= 1.0);
    }

    #[test]
    fn mse_equals_the_utterance_loss(
        p in prop::collection::vec(0.0f64..1.0, 1..30),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Vec<f64> = p.iter().map(|_| rng.random_range(0.0..1.0)).collect();
        let mut g = Graph::new();
        let preds: Vec<Prediction> = p
            .iter()
            .map(|&x| Prediction {
                utterance: g.constant(Tensor::scalar(x)),
                frames: g.constant(Tensor::scalar(x)),
            })
            .collect();
        let l = loss(&mut g, &preds, &t, 0.0).unwrap();
        prop_assert!((g.value(l).item() - mse(&p, &t).unwrap()).abs() < 1e-9);
    }
}

#[test]
fn latency_stats_of_a_single_sample() {
    let s = LatencyStats::from_samples(&[0.25]).unwrap();
    assert_eq!((s.mean, s.p50, s.p95, s.count), (0.25, 0.25, 0.25, 1));
    assert_eq!(s.throughput, 4.0);
    let s = LatencyStats::from_samples(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
    assert_eq!((s.mean, s.p50), (3.0, 3.0));
    assert!((s.p95 - 4.8).abs() < 1e-12);
    assert!(LatencyStats::from_samples(&[]).is_err());
}

fn tiny_model() -> Model<f32> {
    let (m, s, f) = crate::training::tests::tiny_run_config();
    Model::new(m, s, f, 3).unwrap()
}

fn write_set(dir: &Path, n: usize) -> Vec<ManifestEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    (0..n)
        .map(|i| {
            let level = 0.05 + 0.1 * i as f32;
            let s = (0..1200).map(|_| rng.random_range(-level..level)).collect();
            let buf = AudioBuffer::new(s, 16_000, "x").unwrap();
            let path = dir.join(format!("{i}.wav"));
            write_wav_pcm16(&path, &buf).unwrap();
            ManifestEntry {
                audio_path: path,
                target: i as f64 / n as f64,
                split: Split::Test,
            }
        })
        .collect()
}

#[test]
fn evaluate_scores_files_and_lists_failures() {
    let dir = tempfile::tempdir().unwrap();
    let mut entries = write_set(dir.path(), 5);
    let broken = dir.path().join("broken.wav");
    std::fs::write(&broken, b"RIFF????").unwrap();
    entries.push(ManifestEntry {
        audio_path: broken,
        target: 0.5,
        split: Split::Test,
    });
    let model = tiny_model();
    let report = evaluate(&model, &entries, &IngestOptions::default(), "test", Some(2)).unwrap();
    assert_eq!(report.pairs.len(), 5);
    assert_eq!(report.failures.len(), 1);
    assert!(report.failures[0].0.ends_with("broken.wav"));
    assert!(report
        .pairs
        .iter()
        .all(|p| p.prediction > 0.0 && p.prediction < 1.0));
    let stft = Stft::new(model.stft).unwrap();
    let direct = model
        .predict(
            &ingest(&entries[2].audio_path, &IngestOptions::default()).unwrap(),
            &stft,
        )
        .unwrap();
    assert_eq!(report.pairs[2].prediction, direct.utterance as f64);

    let text = report.to_text();
    assert!(text.starts_with("condition = test\ncount = 5\nfailures = 1\n"));
    assert!(text.contains("\n[scatter]\nid,prediction,target\n"));
    write_report(&report, dir.path().join("out")).unwrap();
    let scatter = std::fs::read_to_string(dir.path().join("out/scatter_test.csv")).unwrap();
    assert_eq!(scatter.lines().count(), 6);
    assert!(evaluate(&model, &[], &IngestOptions::default(), "test", None).is_err());
}

#[test]
fn perfect_and_constant_predictors() {
    let pairs: Vec<Pair> = [0.1, 0.4, 0.8]
        .iter()
        .enumerate()
        .map(|(i, &v)| Pair {
            id: i.to_string(),
            prediction: v,
            target: v,
        })
        .collect();
    let lat = LatencyStats::from_samples(&[0.01]).unwrap();
    let r = EvalReport::new("seen", pairs.clone(), lat, vec![]).unwrap();
    assert_eq!(r.mse, 0.0);
    assert!((r.lcc - 1.0).abs() < 1e-15 && (r.srcc - 1.0).abs() < 1e-15);

    let dir = tempfile::tempdir().unwrap();
    let entries = write_set(dir.path(), 4);
    let mut model = tiny_model();
    for (_, t) in model.params.iter_mut() {
        t.data_mut().fill(0.0);
    }
    let err = evaluate(&model, &entries, &IngestOptions::default(), "test", None).unwrap_err();
    assert!(matches!(err, Error::Degenerate(_)), "{err}");
}

#[test]
fn bench_reports_single_measurements_exactly() {
    let model = tiny_model();
    let buf = AudioBuffer::new(vec![0.1; 1600], 16_000, "b").unwrap();
    for scope in [BenchScope::EndToEnd, BenchScope::ForwardOnly] {
        let s = bench(&model, std::slice::from_ref(&buf), 1, 1, scope).unwrap();
        assert_eq!(s.count, 1);
        assert!(s.mean > 0.0 && s.mean == s.p50 && s.p50 == s.p95);
    }
    assert!(bench(&model, &[], 1, 0, BenchScope::EndToEnd).is_err());
}
