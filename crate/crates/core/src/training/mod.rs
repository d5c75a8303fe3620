//! Optimisation of the network against the utterance-plus-frame regression
//! loss with Adam.
//!
//! A batch is a gradient-accumulation group: utterances are processed one at
//! a time, each contributing `L_i / B` to the accumulated gradient, so ragged
//! frame counts never need padding.

mod checkpoint;

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::audio::{ingest, AudioBuffer, IngestOptions};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::evaluation::lcc;
use crate::features::{signal_tensor, Stft, StftConfig};
use crate::labels::{sub_seed, ManifestEntry};
use crate::model::{Forward, Model, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub use checkpoint::{read_dtype, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const SPLIT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];
pub const MIN_SPLIT_ENTRIES: usize = 10;

/// Floating-point type used for training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!(
                "unknown precision `{other}` (expected f32 or f64)"
            ))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Weight of the frame-level term.
    pub alpha: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    /// Drives the split, initialisation and data order.
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Rescale the batch gradient to at most this global norm.
    pub clip_norm: Option<f64>,
    /// Stop at the first epoch boundary at or past this many steps.
    pub max_steps: Option<u64>,
    /// Stop once an epoch's mean training loss falls below this value.
    pub stop_below: Option<f64>,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 6,
            alpha: 1.0,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: None,
            max_steps: None,
            stop_below: None,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("training: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be non-negative");
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

/// Utterance and frame predictions of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    /// `[1 x 1]`.
    pub utterance: Var,
    /// `[T x 1]`.
    pub frames: Var,
}

impl From<&Forward> for Prediction {
    fn from(f: &Forward) -> Self {
        Prediction {
            utterance: f.utterance,
            frames: f.frames,
        }
    }
}

/// `L_sent + alpha * L_frame`: the batch mean of the squared utterance error
/// plus `alpha` times the batch mean of each utterance's mean squared frame
/// error, every frame being compared with the utterance target.
pub fn loss<T: Scalar>(
    g: &mut Graph<T>,
    preds: &[Prediction],
    targets: &[T],
    alpha: T,
) -> Result<Var> {
    if preds.is_empty() {
        return Err(Error::Config("loss of an empty batch".into()));
    }
    if preds.len() != targets.len() {
        return Err(Error::Config(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut total = None;
    for (p, &y) in preds.iter().zip(targets) {
        if g.shape(p.frames)[0] == 0 {
            return Err(Error::TooShort("utterance with no frames".into()));
        }
        let du = g.add_scalar(p.utterance, -y);
        let sent = g.square(du);
        let df = g.add_scalar(p.frames, -y);
        let sq = g.square(df);
        let frame = g.mean(sq);
        let frame = g.mul_scalar(frame, alpha);
        let item = g.add(sent, frame)?;
        total = Some(match total {
            None => item,
            Some(acc) => g.add(acc, item)?,
        });
    }
    let total = total.expect("non-empty batch");
    if preds.len() == 1 {
        return Ok(total);
    }
    Ok(g.mul_scalar(total, T::of(1.0 / preds.len() as f64)))
}

/// Index sets of a train/validation/test partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Random partition of `0..n`: validation and test get `round(n * r)` items,
/// training gets the rest.
pub fn split_indices(n: usize, ratios: [f64; 3], seed: u64) -> Result<SplitIndices> {
    if n < MIN_SPLIT_ENTRIES {
        return Err(Error::Config(format!(
            "splitting needs at least {MIN_SPLIT_ENTRIES} entries, got {n}"
        )));
    }
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (n as f64 * ratios[1]).round() as usize;
    let n_test = (n as f64 * ratios[2]).round() as usize;
    let n_train = n - n_val - n_test;
    Ok(SplitIndices {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    })
}

pub fn split_dataset<E: Clone>(
    entries: &[E],
    ratios: [f64; 3],
    seed: u64,
) -> Result<(Vec<E>, Vec<E>, Vec<E>)> {
    let s = split_indices(entries.len(), ratios, seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| entries[i].clone()).collect();
    Ok((pick(&s.train), pick(&s.val), pick(&s.test)))
}

/// First and second moment estimates, aligned with the parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<_> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Config(format!(
            "adam: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam gradient",
                lhs: p.shape(),
                rhs: g.shape(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (T::of(cfg.adam_beta1), T::of(cfg.adam_beta2));
    let c1 = T::of(1.0 / (1.0 - cfg.adam_beta1.powf(t)));
    let c2 = T::of(1.0 / (1.0 - cfg.adam_beta2.powf(t)));
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.adam_eps));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    for (((_, p), g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m * c1;
            let v_hat = *v * c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before scaling.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One utterance prepared for training: STFT features are fixed, the signal
/// is kept so the learnable filterbank can be re-applied every step.
#[derive(Clone, Debug)]
pub struct Example<T> {
    pub id: String,
    pub stft: Tensor<T>,
    pub signal: Tensor<T>,
    pub target: f64,
}

impl<T: Scalar> Example<T> {
    pub fn from_buffer(buf: &AudioBuffer, stft: &Stft, target: f64) -> Result<Self> {
        Ok(Example {
            id: buf.source_path.clone(),
            stft: stft.features(buf.samples())?,
            signal: signal_tensor(buf),
            target,
        })
    }
}

/// Loads and featurises manifest entries in parallel.
pub fn prepare_examples<T: Scalar>(
    entries: &[ManifestEntry],
    stft: StftConfig,
    opts: &IngestOptions,
) -> Result<Vec<Example<T>>> {
    let stft = Stft::new(stft)?;
    entries
        .par_iter()
        .map(|e| Example::from_buffer(&ingest(&e.audio_path, opts)?, &stft, e.target))
        .collect()
}

/// Loss, utterance prediction and optional parameter gradients of one pass.
type Pass<T> = (f64, f64, Option<Vec<Tensor<T>>>);

/// Loss of one utterance and, if requested, the gradient of `scale * loss`
/// with respect to every parameter.
fn utterance_pass<T: Scalar>(
    model: &Model<T>,
    ex: &Example<T>,
    alpha: f64,
    grad_scale: Option<f64>,
) -> Result<Pass<T>> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, grad_scale.is_some());
    let stft = g.constant(ex.stft.clone());
    let signal = g.constant(ex.signal.clone());
    let out = model.forward_signal(&mut g, &b, stft, signal)?;
    let l = loss(
        &mut g,
        &[Prediction::from(&out)],
        &[T::of(ex.target)],
        T::of(alpha),
    )?;
    let value = g.value(l).item().as_f64();
    let pred = g.value(out.utterance).item().as_f64();
    let Some(scale) = grad_scale else {
        return Ok((value, pred, None));
    };
    let scaled = g.mul_scalar(l, T::of(scale));
    g.backward(scaled)?;
    let grads = b
        .vars()
        .iter()
        .map(|&v| {
            g.grad(v).cloned().unwrap_or_else(|| {
                let [r, c] = g.shape(v);
                Tensor::zeros(r, c)
            })
        })
        .collect();
    Ok((value, pred, Some(grads)))
}

/// Mean loss and utterance predictions of `model` on `examples`.
pub fn evaluate_loss<T: Scalar>(
    model: &Model<T>,
    examples: &[Example<T>],
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    let results: Vec<(f64, f64)> = examples
        .par_iter()
        .map(|ex| utterance_pass(model, ex, alpha, None).map(|(l, p, _)| (l, p)))
        .collect::<Result<_>>()?;
    let mean = results.iter().map(|r| r.0).sum::<f64>() / results.len().max(1) as f64;
    Ok((mean, results.into_iter().map(|r| r.1).collect()))
}

/// Counters that, with the seed, determine the rest of a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Progress {
    pub epoch: usize,
    pub step: u64,
    pub best_val_loss: f64,
    pub bad_epochs: usize,
    pub last_train_loss: f64,
}

impl Default for Progress {
    fn default() -> Self {
        Progress {
            epoch: 0,
            step: 0,
            best_val_loss: f64::INFINITY,
            bad_epochs: 0,
            last_train_loss: f64::INFINITY,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Undefined when the predictions or targets are constant.
    pub val_lcc: Option<f64>,
    pub steps: u64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,val_lcc";

    pub fn csv_row(&self) -> String {
        let lcc = self.val_lcc.map_or_else(|| "nan".into(), |v| v.to_string());
        format!(
            "{},{},{},{}",
            self.epoch, self.train_loss, self.val_loss, lcc
        )
    }
}

/// Why [`Trainer::fit`] returned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    Patience,
    MaxSteps,
    LossTarget,
}

/// A training run in progress: parameters, optimiser state, counters and the
/// best parameters seen so far.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub model: Model<T>,
    pub adam: AdamState<T>,
    pub progress: Progress,
    pub best: ParamStore<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        Ok(Trainer {
            cfg,
            adam: AdamState::new(&model.params),
            best: model.params.clone(),
            model,
            progress: Progress::default(),
        })
    }

    /// The model with the best validation loss so far.
    pub fn best_model(&self) -> Model<T> {
        Model {
            params: self.best.clone(),
            ..self.model.clone()
        }
    }

    /// One optimisation step over `batch`; returns the batch mean loss.
    pub fn step(&mut self, batch: &[&Example<T>]) -> Result<f64> {
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        let mut acc: Option<Vec<Tensor<T>>> = None;
        for ex in batch {
            let (l, _, grads) = utterance_pass(&self.model, ex, self.cfg.alpha, Some(scale))?;
            total += l;
            let grads = grads.expect("gradients requested");
            match &mut acc {
                None => acc = Some(grads),
                Some(a) => a.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
            }
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch: self.progress.epoch,
                loss,
            });
        }
        let mut grads = acc.ok_or_else(|| Error::Config("empty batch".into()))?;
        if let Some(max) = self.cfg.clip_norm {
            clip_grad_norm(&mut grads, max);
        }
        adam_step(&mut self.model.params, &grads, &mut self.adam, &self.cfg)?;
        self.progress.step += 1;
        Ok(loss)
    }

    /// Shuffled pass over `train`; returns the mean batch loss.
    pub fn train_epoch(&mut self, train: &[Example<T>]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Config("no training examples".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(sub_seed(self.cfg.seed, self.progress.epoch as u64));
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&Example<T>> = chunk.iter().map(|&i| &train[i]).collect();
            losses.push(self.step(&batch)?);
        }
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        let p = &self.progress;
        if matches!(self.cfg.stop_below, Some(t) if p.last_train_loss < t) {
            Some(StopReason::LossTarget)
        } else if p.bad_epochs > self.cfg.patience {
            Some(StopReason::Patience)
        } else if matches!(self.cfg.max_steps, Some(s) if p.step >= s) {
            Some(StopReason::MaxSteps)
        } else if p.epoch >= self.cfg.max_epochs {
            Some(StopReason::MaxEpochs)
        } else {
            None
        }
    }

    /// Runs one epoch and its validation, updating the best parameters and
    /// the early-stopping counter. With no validation examples the training
    /// loss is monitored instead.
    pub fn run_epoch(&mut self, train: &[Example<T>], val: &[Example<T>]) -> Result<EpochLog> {
        let train_loss = self.train_epoch(train)?;
        let (val_loss, val_lcc) = if val.is_empty() {
            (train_loss, None)
        } else {
            let (l, preds) = evaluate_loss(&self.model, val, self.cfg.alpha)?;
            let targets: Vec<f64> = val.iter().map(|e| e.target).collect();
            (l, lcc(&preds, &targets).ok())
        };
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch: self.progress.epoch,
                loss: val_loss,
            });
        }
        let p = &mut self.progress;
        p.epoch += 1;
        p.last_train_loss = train_loss;
        if val_loss < p.best_val_loss {
            p.best_val_loss = val_loss;
            p.bad_epochs = 0;
            self.best = self.model.params.clone();
        } else {
            p.bad_epochs += 1;
        }
        Ok(EpochLog {
            epoch: p.epoch,
            train_loss,
            val_loss,
            val_lcc,
            steps: p.step,
        })
    }

    /// Trains until a stopping rule fires, calling `on_epoch` after every
    /// epoch (for logging and checkpointing).
    pub fn fit(
        &mut self,
        train: &[Example<T>],
        val: &[Example<T>],
        mut on_epoch: impl FnMut(&Self, &EpochLog) -> Result<()>,
    ) -> Result<StopReason> {
        loop {
            if let Some(reason) = self.stop_reason() {
                return Ok(reason);
            }
            let log = self.run_epoch(train, val)?;
            on_epoch(self, &log)?;
        }
    }
}

#[cfg(test)]
pub(crate) mod tests;
