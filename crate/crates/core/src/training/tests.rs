use super::*;
use crate::features::SincConfig;
use crate::model::ModelConfig;
use proptest::prelude::*;
use rand::RngExt;

fn scalar_pred(g: &mut Graph<f64>, utt: f64, frames: &[f64]) -> Prediction {
    Prediction {
        utterance: g.constant(Tensor::scalar(utt)),
        frames: g.constant(Tensor::col(frames.to_vec())),
    }
}

#[test]
fn loss_of_perfect_predictions_is_zero() {
    let mut g = Graph::new();
    let p = scalar_pred(&mut g, 0.3, &[0.3, 0.3, 0.3]);
    let l = loss(&mut g, &[p], &[0.3], 1.0).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn loss_hand_example() {
    // (0.7 - 0.5)^2 + ((0.5 - 0.5)^2 + (0.9 - 0.5)^2) / 2 = 0.04 + 0.08.
    let mut g = Graph::new();
    let p = scalar_pred(&mut g, 0.7, &[0.5, 0.9]);
    let l = loss(&mut g, &[p], &[0.5], 1.0).unwrap();
    assert_eq!(g.value(l).item(), 0.12);
}

#[test]
fn zero_alpha_leaves_the_utterance_term() {
    let mut g = Graph::new();
    let p = scalar_pred(&mut g, 0.7, &[0.1, 0.9]);
    let l = loss(&mut g, &[p], &[0.5], 0.0).unwrap();
    assert_eq!(g.value(l).item(), (0.7f64 - 0.5).powi(2));
}

#[test]
fn ragged_batch_averages_per_utterance_losses() {
    let mut g = Graph::new();
    let a = scalar_pred(&mut g, 0.2, &[0.1, 0.4, 0.9]);
    let b = scalar_pred(&mut g, 0.8, &[0.6]);
    let both = loss(&mut g, &[a, b], &[0.3, 0.7], 0.5).unwrap();
    let la = loss(&mut g, &[a], &[0.3], 0.5).unwrap();
    let lb = loss(&mut g, &[b], &[0.7], 0.5).unwrap();
    let mean = (g.value(la).item() + g.value(lb).item()) / 2.0;
    assert!((g.value(both).item() - mean).abs() < 1e-15);
}

#[test]
fn loss_rejects_empty_input() {
    let mut g = Graph::<f64>::new();
    assert!(loss(&mut g, &[], &[], 1.0).is_err());
    let p = Prediction {
        utterance: g.constant(Tensor::scalar(0.5)),
        frames: g.constant(Tensor::zeros(0, 1)),
    };
    assert!(matches!(
        loss(&mut g, &[p], &[0.5], 1.0),
        Err(Error::TooShort(_))
    ));
    let q = scalar_pred(&mut g, 0.5, &[0.5]);
    assert!(loss(&mut g, &[q], &[0.5, 0.1], 1.0).is_err());
}

proptest! {
    #[test]
    fn loss_is_nonnegative_and_zero_only_at_targets(
        utt in 0.0f64..1.0,
        frames in prop::collection::vec(0.0f64..1.0, 1..12),
        y in 0.0f64..1.0,
        alpha in 0.0f64..3.0,
    ) {
        let mut g = Graph::new();
        let p = scalar_pred(&mut g, utt, &frames);
        let l = loss(&mut g, &[p], &[y], alpha).unwrap();
        let l = g.value(l).item();
        prop_assert!(l >= 0.0);
        let exact = utt == y && (alpha == 0.0 || frames.iter().all(|&f| f == y));
        prop_assert_eq!(l == 0.0, exact);
    }
}

#[test]
fn split_sizes_follow_the_ratios() {
    let s = split_indices(100, SPLIT_RATIOS, 1).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
    let s = split_indices(10, SPLIT_RATIOS, 1).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
    let s9 = split_indices(37, SPLIT_RATIOS, 9).unwrap();
    assert_eq!(s9, split_indices(37, SPLIT_RATIOS, 9).unwrap());
    assert_ne!(s9, split_indices(37, SPLIT_RATIOS, 10).unwrap());
    assert!(split_indices(9, SPLIT_RATIOS, 1).is_err());
    assert!(split_indices(20, [0.5, 0.5, 0.5], 1).is_err());
    let (tr, va, te) = split_dataset(&(0..50).collect::<Vec<_>>(), SPLIT_RATIOS, 2).unwrap();
    assert_eq!((tr.len(), va.len(), te.len()), (40, 5, 5));
}

proptest! {
    #[test]
    fn split_is_a_partition(n in 10usize..400, seed in any::<u64>()) {
        let s = split_indices(n, SPLIT_RATIOS, seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(s.val.len(), (n as f64 * 0.1).round() as usize);
    }
}

fn one_param(v: f64) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::scalar(v));
    p
}

#[test]
fn adam_first_step_moves_by_lr() {
    let cfg = TrainConfig::default();
    let mut p = one_param(0.5);
    let mut st = AdamState::new(&p);
    adam_step(&mut p, &[Tensor::scalar(1.0)], &mut st, &cfg).unwrap();
    // m_hat = v_hat = 1 after bias correction.
    let expected = 0.5 - cfg.lr / (1.0 + cfg.adam_eps);
    assert!((p.get("w").unwrap().item() - expected).abs() < 1e-15);
    assert_eq!(st.step, 1);
}

#[test]
fn adam_with_zero_gradient_only_decays_moments() {
    let cfg = TrainConfig::default();
    let mut p = one_param(0.5);
    let mut st = AdamState::new(&p);
    adam_step(&mut p, &[Tensor::scalar(2.0)], &mut st, &cfg).unwrap();
    let (m, v, w) = (st.m[0].item(), st.v[0].item(), p.get("w").unwrap().item());
    adam_step(&mut p, &[Tensor::scalar(0.0)], &mut st, &cfg).unwrap();
    assert_eq!(st.m[0].item(), m * 0.9);
    assert_eq!(st.v[0].item(), v * 0.999);
    // The decayed first moment still moves the parameter; from zero moments
    // a zero gradient does not.
    assert!(p.get("w").unwrap().item() < w);
    let mut fresh = one_param(0.5);
    let mut st = AdamState::new(&fresh);
    adam_step(&mut fresh, &[Tensor::scalar(0.0)], &mut st, &cfg).unwrap();
    assert_eq!(fresh.get("w").unwrap().item(), 0.5);
}

#[test]
fn adam_rejects_non_finite_gradients_by_name() {
    let cfg = TrainConfig::default();
    let mut p = one_param(0.5);
    p.insert("head.bias", Tensor::scalar(0.0));
    let mut st = AdamState::new(&p);
    let before = (p.clone(), st.clone());
    let err = adam_step(
        &mut p,
        &[Tensor::scalar(1.0), Tensor::scalar(f64::NAN)],
        &mut st,
        &cfg,
    )
    .unwrap_err();
    assert!(matches!(&err, Error::NonFiniteGradient(n) if n == "head.bias"));
    assert_eq!((p, st), before);
}

#[test]
fn clipping_bounds_the_global_norm() {
    let mut g = vec![Tensor::<f64>::row(vec![3.0, 0.0]), Tensor::scalar(4.0)];
    assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
    assert_eq!(g[1].item(), 4.0);
    clip_grad_norm(&mut g, 1.0);
    assert!((g[0].get(0, 0) - 0.6).abs() < 1e-15);
    assert!((g[1].item() - 0.8).abs() < 1e-15);
}

pub(crate) fn tiny_run_config() -> (ModelConfig, StftConfig, SincConfig) {
    let model = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_blocks: 1,
        conv_channels: 8,
        ..ModelConfig::default()
    };
    let stft = StftConfig {
        win_length: 64,
        hop_length: 32,
        fft_size: 64,
        ..StftConfig::default()
    };
    let sinc = SincConfig {
        num_filters: 4,
        kernel_length: 15,
        frame_win: 64,
        frame_hop: 32,
        ..SincConfig::default()
    };
    (model, stft, sinc)
}

fn tiny_examples<T: Scalar>(n: usize, seed: u64) -> Vec<Example<T>> {
    let (_, stft, _) = tiny_run_config();
    let stft = Stft::new(stft).unwrap();
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, i as u64));
            let len = rng.random_range(400..900);
            let level = rng.random_range(0.05..0.5);
            let s = (0..len).map(|_| rng.random_range(-level..level)).collect();
            let buf = AudioBuffer::new(s, 16_000, format!("u{i}")).unwrap();
            Example::from_buffer(&buf, &stft, level as f64 * 1.5).unwrap()
        })
        .collect()
}

fn tiny_trainer<T: Scalar>(cfg: TrainConfig) -> Trainer<T> {
    let (m, s, f) = tiny_run_config();
    Trainer::new(Model::new(m, s, f, cfg.seed).unwrap(), cfg).unwrap()
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        batch_size: 3,
        max_epochs: 4,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn training_reduces_the_loss_and_is_deterministic() {
    let data = tiny_examples::<f64>(9, 1);
    let run = || {
        let mut tr = tiny_trainer::<f64>(TrainConfig {
            max_epochs: 8,
            ..quick_cfg()
        });
        let mut logs = Vec::new();
        let reason = tr
            .fit(&data, &data[..3], |_, l| {
                logs.push(*l);
                Ok(())
            })
            .unwrap();
        (tr, logs, reason)
    };
    let (a, la, reason) = run();
    let (b, lb, _) = run();
    assert_eq!(reason, StopReason::MaxEpochs);
    assert_eq!(la.len(), 8);
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(la, lb);
    assert!(la[7].train_loss < la[0].train_loss, "{la:?}");
    assert_eq!(la[7].steps, 8 * 3);
    assert!(la.iter().all(|l| l.val_lcc.is_some()));
}

#[test]
fn zero_patience_stops_after_the_first_non_improving_epoch() {
    let data = tiny_examples::<f64>(6, 2);
    // A large step size makes the validation loss bounce quickly.
    let mut tr = tiny_trainer::<f64>(TrainConfig {
        lr: 0.05,
        patience: 0,
        max_epochs: 50,
        ..quick_cfg()
    });
    let mut logs = Vec::new();
    let reason = tr
        .fit(&data, &data[..2], |_, l| {
            logs.push(*l);
            Ok(())
        })
        .unwrap();
    assert_eq!(reason, StopReason::Patience);
    let first_bad = logs
        .windows(2)
        .position(|w| {
            let best = logs[..]
                .iter()
                .take_while(|l| l.epoch <= w[0].epoch)
                .map(|l| l.val_loss)
                .fold(f64::INFINITY, f64::min);
            w[1].val_loss >= best
        })
        .map(|i| i + 1)
        .unwrap();
    assert_eq!(logs.len(), first_bad + 1);
}

#[test]
fn stopping_rules() {
    let data = tiny_examples::<f64>(4, 3);
    let mut tr = tiny_trainer::<f64>(TrainConfig {
        max_steps: Some(5),
        batch_size: 2,
        ..quick_cfg()
    });
    assert_eq!(
        tr.fit(&data, &[], |_, _| Ok(())).unwrap(),
        StopReason::MaxSteps
    );
    assert_eq!(tr.progress.step, 6);
    let mut tr = tiny_trainer::<f64>(TrainConfig {
        stop_below: Some(10.0),
        ..quick_cfg()
    });
    assert_eq!(
        tr.fit(&data, &[], |_, _| Ok(())).unwrap(),
        StopReason::LossTarget
    );
    assert_eq!(tr.progress.epoch, 1);
}

#[test]
fn divergence_is_reported() {
    let data = tiny_examples::<f64>(3, 4);
    let mut tr = tiny_trainer::<f64>(quick_cfg());
    tr.model
        .params
        .get_mut("head.bias")
        .unwrap()
        .set(0, 0, f64::NAN);
    let before = tr.model.params.clone();
    let err = tr.fit(&data, &[], |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
    for (name, t) in before.iter() {
        let now = tr.model.params.get(name).unwrap();
        let same = t
            .data()
            .iter()
            .zip(now.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "{name} changed");
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let data = tiny_examples::<f32>(6, 5);
    let mut tr = tiny_trainer::<f32>(TrainConfig {
        max_epochs: 2,
        clip_norm: Some(5.0),
        ..quick_cfg()
    });
    tr.fit(&data, &data[..2], |_, _| Ok(())).unwrap();
    let ckpt = Checkpoint::from_trainer(&tr, IngestOptions::default());
    let bytes = ckpt.to_bytes();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    ckpt.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(read_dtype(&path).unwrap(), "f32");
    assert!(Checkpoint::<f64>::load(&path).is_err());
    let (_, m64) = Checkpoint::<f64>::load_model(&path).unwrap();
    assert_eq!(m64.cast::<f32>().params, tr.model.params);

    let best = Checkpoint::best_of(&tr, IngestOptions::default());
    let back = Checkpoint::<f32>::from_bytes(&best.to_bytes()).unwrap();
    assert!(back.adam.is_none() && back.best.is_none());
    assert!(back.into_trainer().is_err());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let tr = tiny_trainer::<f64>(quick_cfg());
    let bytes = Checkpoint::from_trainer(&tr, IngestOptions::default()).to_bytes();
    assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::<f64>::from_bytes(&extra).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(Checkpoint::<f64>::from_bytes(&magic).is_err());
    let mut version = bytes;
    version[8] = 9;
    assert!(Checkpoint::<f64>::from_bytes(&version)
        .unwrap_err()
        .to_string()
        .contains("version"));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let data = tiny_examples::<f64>(7, 6);
    let cfg = TrainConfig {
        max_epochs: 5,
        ..quick_cfg()
    };
    let mut full = tiny_trainer::<f64>(cfg);
    full.fit(&data, &data[..2], |_, _| Ok(())).unwrap();

    let mut first = tiny_trainer::<f64>(TrainConfig {
        max_epochs: 2,
        ..cfg
    });
    first.fit(&data, &data[..2], |_, _| Ok(())).unwrap();
    let bytes = Checkpoint::from_trainer(&first, IngestOptions::default()).to_bytes();
    let mut resumed = Checkpoint::<f64>::from_bytes(&bytes)
        .unwrap()
        .into_trainer()
        .unwrap();
    resumed.cfg.max_epochs = 5;
    resumed.fit(&data, &data[..2], |_, _| Ok(())).unwrap();

    assert_eq!(resumed.model.params, full.model.params);
    assert_eq!(resumed.adam, full.adam);
    assert_eq!(resumed.progress, full.progress);
    assert_eq!(resumed.best, full.best);
}

/// Central differences of the loss with respect to single parameter entries
/// against the accumulated backward gradient.
#[test]
fn loss_gradient_matches_finite_differences() {
    let data = tiny_examples::<f64>(2, 7);
    let tr = tiny_trainer::<f64>(quick_cfg());
    let batch: Vec<&Example<f64>> = data.iter().collect();
    let grads = {
        let mut acc: Option<Vec<Tensor<f64>>> = None;
        for ex in &batch {
            let (_, _, g) = utterance_pass(&tr.model, ex, 1.0, Some(0.5)).unwrap();
            let g = g.unwrap();
            match &mut acc {
                None => acc = Some(g),
                Some(a) => a.iter_mut().zip(&g).for_each(|(a, g)| a.add_assign(g)),
            }
        }
        acc.unwrap()
    };
    let batch_loss = |m: &Model<f64>| {
        batch
            .iter()
            .map(|ex| utterance_pass(m, ex, 1.0, None).unwrap().0)
            .sum::<f64>()
            / 2.0
    };
    let names: Vec<String> = tr.model.params.names().map(String::from).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = 1e-5;
    for (pi, name) in names.iter().enumerate() {
        let n = tr.model.params.get(name).unwrap().len();
        let k = rng.random_range(0..n);
        let mut plus = tr.model.clone();
        plus.params.get_mut(name).unwrap().data_mut()[k] += h;
        let mut minus = tr.model.clone();
        minus.params.get_mut(name).unwrap().data_mut()[k] -= h;
        let fd = (batch_loss(&plus) - batch_loss(&minus)) / (2.0 * h);
        let an = grads[pi].data()[k];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        assert!(rel < 1e-3, "{name}[{k}]: analytic {an}, numeric {fd}");
    }
}
