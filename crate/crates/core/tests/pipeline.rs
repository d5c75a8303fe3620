use deepgesi::audio::{AudioBuffer, IngestOptions};
use deepgesi::autodiff::Graph;
use deepgesi::config::RunConfig;
use deepgesi::evaluation::evaluate;
use deepgesi::features::{SincConfig, Stft, StftConfig};
use deepgesi::labels::{select, synth_dataset, synth_utterance, Split};
use deepgesi::model::{Model, ModelConfig};
use deepgesi::training::{prepare_examples, Checkpoint, Example, TrainConfig, Trainer};

fn small_config() -> RunConfig {
    RunConfig {
        model: ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_blocks: 1,
            conv_channels: 16,
            ..ModelConfig::default()
        },
        stft: StftConfig {
            win_length: 128,
            hop_length: 64,
            fft_size: 128,
            ..StftConfig::default()
        },
        sinc: SincConfig {
            num_filters: 6,
            kernel_length: 31,
            frame_win: 128,
            frame_hop: 64,
            ..SincConfig::default()
        },
        ..RunConfig::default()
    }
}

fn utterance_score(model: &Model<f64>, ex: &Example<f64>) -> f64 {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let stft = g.constant(ex.stft.clone());
    let signal = g.constant(ex.signal.clone());
    let out = model.forward_signal(&mut g, &b, stft, signal).unwrap();
    g.value(out.utterance).item()
}

#[test]
fn utterance_score_gradient_reaches_the_sinc_cutoffs() {
    let cfg = small_config();
    let mut model = Model::<f64>::new(cfg.model, cfg.stft, cfg.sinc, 5).unwrap();
    // The mel initialisation puts the lowest f1 on the |low_hz| kink and the
    // highest f2 on the Nyquist clamp, where central differences are
    // one-sided; move both off.
    model.params.get_mut("lfb.low_hz").unwrap().set(0, 0, 40.0);
    let top = cfg.sinc.num_filters - 1;
    let band = model.params.get_mut("lfb.band_hz").unwrap();
    band.set(top, 0, band.get(top, 0) - 200.0);
    let utt = synth_utterance(9);
    let samples = utt.degraded[..3200].to_vec();
    let buf = AudioBuffer::new(samples, 16_000, "synth").unwrap();
    let ex = Example::<f64>::from_buffer(&buf, &Stft::new(cfg.stft).unwrap(), 0.0).unwrap();

    let mut g = Graph::new();
    let b = model.bind(&mut g, true);
    let stft = g.constant(ex.stft.clone());
    let signal = g.constant(ex.signal.clone());
    let out = model.forward_signal(&mut g, &b, stft, signal).unwrap();
    g.backward(out.utterance).unwrap();

    for name in ["lfb.low_hz", "lfb.band_hz"] {
        let var = b.vars()[model.params.index_of(name).unwrap()];
        let analytic = g.grad(var).unwrap().clone();
        for filter in 0..cfg.sinc.num_filters {
            let x = model.params.get(name).unwrap().get(filter, 0);
            let h = 1e-5 * x.abs().max(1.0);
            let shifted = |dx: f64| {
                let mut m = model.clone();
                m.params.get_mut(name).unwrap().set(filter, 0, x + dx);
                utterance_score(&m, &ex)
            };
            let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            let a = analytic.get(filter, 0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(
                rel < 1e-3,
                "{name}[{filter}]: analytic {a}, numeric {numeric}"
            );
        }
    }
}

#[test]
fn trained_checkpoint_scores_a_synthetic_split() {
    let dir = tempfile::tempdir().unwrap();
    let entries = synth_dataset(20, 3, dir.path().join("data")).unwrap();
    let mut cfg = small_config();
    cfg.train = TrainConfig {
        lr: 3e-3,
        batch_size: 4,
        max_epochs: 3,
        seed: 1,
        ..TrainConfig::default()
    };
    let opts = cfg.ingest_options();
    let train = prepare_examples::<f32>(&select(&entries, Split::Train), cfg.stft, &opts).unwrap();
    let val = prepare_examples::<f32>(&select(&entries, Split::Val), cfg.stft, &opts).unwrap();
    let model = Model::<f32>::new(cfg.model, cfg.stft, cfg.sinc, cfg.train.seed).unwrap();
    let mut tr = Trainer::new(model, cfg.train).unwrap();
    let mut logs = Vec::new();
    tr.fit(&train, &val, |_, log| {
        logs.push(*log);
        Ok(())
    })
    .unwrap();
    assert_eq!(logs.len(), 3);
    assert!(logs
        .iter()
        .all(|l| l.train_loss.is_finite() && l.val_loss.is_finite()));

    let path = dir.path().join("best.ckpt");
    Checkpoint::best_of(&tr, IngestOptions::default())
        .save(&path)
        .unwrap();
    let (loaded_cfg, loaded) = Checkpoint::<f32>::load_model(&path).unwrap();
    assert_eq!(loaded_cfg.model, cfg.model);
    assert_eq!(loaded.params, tr.best_model().params);

    let test = select(&entries, Split::Test);
    let report = evaluate(&loaded, &test, &opts, "test", Some(1)).unwrap();
    assert_eq!(report.pairs.len(), test.len());
    assert!(report.failures.is_empty());
    assert!(report
        .pairs
        .iter()
        .all(|p| p.prediction > 0.0 && p.prediction < 1.0));
}
