//! The two input streams of the network: log-magnitude STFT features and
//! learnable sinc-filterbank (LFB) envelopes, aligned frame by frame.
//!
//! Both streams frame the signal identically (25 ms windows, 10 ms hop by
//! default), so for any input length they produce the same number of frames.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};

use crate::audio::AudioBuffer;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowKind {
    Hann,
    Hamming,
}

impl WindowKind {
    pub fn name(self) -> &'static str {
        match self {
            WindowKind::Hann => "hann",
            WindowKind::Hamming => "hamming",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hann" => Ok(WindowKind::Hann),
            "hamming" => Ok(WindowKind::Hamming),
            other => Err(Error::Config(format!("unknown window `{other}`"))),
        }
    }

    /// Periodic window of length `n`, as used for spectral analysis.
    fn periodic(self, n: usize) -> Vec<f64> {
        let a0 = match self {
            WindowKind::Hann => 0.5,
            WindowKind::Hamming => 0.54,
        };
        (0..n)
            .map(|i| a0 - (1.0 - a0) * (2.0 * PI * i as f64 / n as f64).cos())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StftConfig {
    pub win_length: usize,
    pub hop_length: usize,
    pub fft_size: usize,
    pub window: WindowKind,
    /// Floor added to magnitudes before the log.
    pub eps: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            win_length: 400,
            hop_length: 160,
            fft_size: 512,
            window: WindowKind::Hann,
            eps: 1e-8,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.win_length == 0 || self.win_length > self.fft_size {
            return Err(Error::Config(format!(
                "stft: need 0 < win_length ({}) <= fft_size ({})",
                self.win_length, self.fft_size
            )));
        }
        if self.hop_length == 0 || self.hop_length > self.win_length {
            return Err(Error::Config(format!(
                "stft: need 0 < hop_length ({}) <= win_length ({})",
                self.hop_length, self.win_length
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("stft: eps must be positive".into()));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }
}

/// Number of frames of length `win` at stride `hop` that fit in `len`
/// samples.
pub fn frame_count(len: usize, win: usize, hop: usize) -> Result<usize> {
    if len < win {
        return Err(Error::TooShort(format!(
            "{len} samples is shorter than one {win}-sample analysis window"
        )));
    }
    Ok(1 + (len - win) / hop)
}

/// Reusable STFT analyzer (the FFT plan is built once).
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Stft {
            window: cfg.window.periodic(cfg.win_length),
            fft: FftPlanner::new().plan_fft_forward(cfg.fft_size),
            cfg,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// `[frames x fft_size/2+1]` matrix of `ln(|X| + eps)`.
    pub fn features<T: Scalar>(&self, samples: &[f32]) -> Result<Tensor<T>> {
        let c = &self.cfg;
        let frames = frame_count(samples.len(), c.win_length, c.hop_length)?;
        let bins = c.num_bins();
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); c.fft_size];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let frame = &samples[t * c.hop_length..t * c.hop_length + c.win_length];
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < c.win_length {
                    Complex::new(frame[i] as f64 * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            out.extend(
                buf[..bins]
                    .iter()
                    .map(|z| T::of((z.norm_sqr().sqrt() + c.eps).ln())),
            );
        }
        Ok(Tensor::new(frames, bins, out))
    }
}

pub fn stft_features<T: Scalar>(buf: &AudioBuffer, cfg: &StftConfig) -> Result<Tensor<T>> {
    Stft::new(*cfg)?.features(buf.samples())
}

/// Hyperparameters of the learnable sinc filterbank.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SincConfig {
    pub num_filters: usize,
    /// Odd number of taps.
    pub kernel_length: usize,
    pub sample_rate: u32,
    /// Lowest admissible lower cutoff.
    pub min_hz: f64,
    /// Smallest admissible bandwidth.
    pub min_band_hz: f64,
    pub frame_win: usize,
    pub frame_hop: usize,
    pub eps: f64,
}

impl Default for SincConfig {
    fn default() -> Self {
        SincConfig {
            num_filters: 64,
            kernel_length: 129,
            sample_rate: 16_000,
            min_hz: 50.0,
            min_band_hz: 50.0,
            frame_win: 400,
            frame_hop: 160,
            eps: 1e-8,
        }
    }
}

impl SincConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("sinc filterbank: {m}")));
        if self.num_filters == 0 {
            return bad("num_filters must be positive".into());
        }
        if self.kernel_length.is_multiple_of(2) {
            return bad(format!("kernel_length {} must be odd", self.kernel_length));
        }
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        if !(self.min_hz > 0.0 && self.min_band_hz > 0.0)
            || self.min_hz + self.min_band_hz >= self.nyquist()
        {
            return bad("need 0 < min_hz, 0 < min_band_hz, min_hz + min_band_hz < nyquist".into());
        }
        if self.frame_win == 0 || self.frame_hop == 0 || self.frame_hop > self.frame_win {
            return bad("need 0 < frame_hop <= frame_win".into());
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive".into());
        }
        Ok(())
    }

    pub fn nyquist(&self) -> f64 {
        self.sample_rate as f64 / 2.0
    }

    /// Taps `n = -(L-1)/2 ..= (L-1)/2`.
    fn offsets(&self) -> impl Iterator<Item = f64> {
        let half = (self.kernel_length / 2) as i64;
        (-half..=half).map(|n| n as f64)
    }

    /// Symmetric Hamming taper over the kernel.
    fn taper(&self) -> Vec<f64> {
        let l = self.kernel_length;
        if l == 1 {
            return vec![1.0];
        }
        (0..l)
            .map(|m| 0.54 - 0.46 * (2.0 * PI * m as f64 / (l - 1) as f64).cos())
            .collect()
    }

    /// Maps unconstrained parameters to cutoffs with
    /// `min_hz <= f1 <= nyquist - min_band_hz` and `f1 + min_band_hz <= f2 <= nyquist`.
    pub fn cutoffs(&self, low: f64, band: f64) -> (f64, f64) {
        let nyq = self.nyquist();
        let f1 = (self.min_hz + low.abs()).min(nyq - self.min_band_hz);
        let f2 = (f1 + self.min_band_hz + band.abs()).min(nyq);
        (f1, f2)
    }
}

/// Learnable band-pass filterbank. `low_hz` and `band_hz` are the
/// unconstrained `[C x 1]` parameters; see [`SincConfig::cutoffs`].
#[derive(Clone, Debug, PartialEq)]
pub struct SincFilterbank<T> {
    pub cfg: SincConfig,
    pub low_hz: Tensor<T>,
    pub band_hz: Tensor<T>,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl<T: Scalar> SincFilterbank<T> {
    /// Band edges equally spaced on the mel scale from `min_hz` to Nyquist.
    pub fn mel_init(cfg: SincConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.num_filters;
        let lo = hz_to_mel(cfg.min_hz);
        let hi = hz_to_mel(cfg.nyquist() - cfg.min_band_hz);
        let edges: Vec<f64> = (0..=c)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / c as f64))
            .collect();
        let low = (0..c).map(|i| edges[i] - cfg.min_hz).collect();
        let band = (0..c).map(|i| edges[i + 1] - edges[i]).collect();
        Ok(SincFilterbank {
            cfg,
            low_hz: Tensor::col(low).cast(),
            band_hz: Tensor::col(band).cast(),
        })
    }

    /// Filterbank with explicit parameters (`[C x 1]` each).
    pub fn from_params(cfg: SincConfig, low_hz: Tensor<T>, band_hz: Tensor<T>) -> Result<Self> {
        cfg.validate()?;
        let want = [cfg.num_filters, 1];
        if low_hz.shape() != want || band_hz.shape() != want {
            return Err(Error::Shape {
                op: "sinc filterbank parameters",
                lhs: low_hz.shape(),
                rhs: band_hz.shape(),
            });
        }
        Ok(SincFilterbank {
            cfg,
            low_hz,
            band_hz,
        })
    }

    /// Effective `(f1, f2)` cutoffs in Hz per filter.
    pub fn band_edges(&self) -> Vec<(f64, f64)> {
        self.low_hz
            .data()
            .iter()
            .zip(self.band_hz.data())
            .map(|(l, b)| self.cfg.cutoffs(l.as_f64(), b.as_f64()))
            .collect()
    }

    /// `[C x L]` impulse responses.
    pub fn kernels(&self) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let low = g.constant(self.low_hz.clone());
        let band = g.constant(self.band_hz.clone());
        let k = sinc_kernels(&mut g, low, band, &self.cfg)?;
        Ok(g.value(k).clone())
    }
}

/// Windowed ideal band-pass impulse responses for cutoffs given as `[C x 1]`
/// fractions of the sample rate: `(sin(2 pi f2 n) - sin(2 pi f1 n)) / (pi n)`,
/// with value `2 (f2 - f1)` at `n = 0`.
pub fn bandpass_kernels<T: Scalar>(
    g: &mut Graph<T>,
    f1: Var,
    f2: Var,
    cfg: &SincConfig,
) -> Result<Var> {
    bandpass_taps(g, f1, f2, cfg, cfg.kernel_length)
}

/// Taps at offsets `-(L-1)/2..=0` of [`bandpass_kernels`]; the kernels are
/// even in `n`, so these determine them.
pub fn bandpass_half_kernels<T: Scalar>(
    g: &mut Graph<T>,
    f1: Var,
    f2: Var,
    cfg: &SincConfig,
) -> Result<Var> {
    bandpass_taps(g, f1, f2, cfg, cfg.kernel_length / 2 + 1)
}

/// First `count` taps of the kernels.
fn bandpass_taps<T: Scalar>(
    g: &mut Graph<T>,
    f1: Var,
    f2: Var,
    cfg: &SincConfig,
    count: usize,
) -> Result<Var> {
    let center = cfg.kernel_length / 2;
    let taper = cfg.taper();
    let offsets: Vec<f64> = cfg.offsets().take(count).collect();
    let phase_row: Vec<f64> = offsets.iter().map(|n| 2.0 * PI * n).collect();
    let coef: Vec<f64> = offsets
        .iter()
        .zip(&taper)
        .map(|(&n, w)| if n == 0.0 { 0.0 } else { w / (PI * n) })
        .collect();
    let mut center_row = vec![0.0; count];
    if center < count {
        center_row[center] = 2.0 * taper[center];
    }

    let phase = g.constant(Tensor::from_f64(1, count, &phase_row));
    let coef = g.constant(Tensor::from_f64(1, count, &coef));
    let center_row = g.constant(Tensor::from_f64(1, count, &center_row));

    let p1 = g.matmul(f1, phase)?;
    let p2 = g.matmul(f2, phase)?;
    let s1 = g.sin(p1);
    let s2 = g.sin(p2);
    let diff = g.sub(s2, s1)?;
    let off_center = g.mul(diff, coef)?;
    let width = g.sub(f2, f1)?;
    let at_center = g.matmul(width, center_row)?;
    g.add(off_center, at_center)
}

/// Normalized `[C x 1]` cutoffs `(f1, f2) / sample_rate` from the
/// unconstrained parameters.
fn normalized_cutoffs<T: Scalar>(
    g: &mut Graph<T>,
    low_hz: Var,
    band_hz: Var,
    cfg: &SincConfig,
) -> Result<(Var, Var)> {
    let nyq = T::of(cfg.nyquist());
    let min_band = T::of(cfg.min_band_hz);
    let low = g.abs(low_hz);
    let f1 = g.add_scalar(low, T::of(cfg.min_hz));
    let f1 = g.clamp_max(f1, nyq - min_band);
    let band = g.abs(band_hz);
    let f2 = g.add(f1, band)?;
    let f2 = g.add_scalar(f2, min_band);
    let f2 = g.clamp_max(f2, nyq);
    let inv_fs = T::of(1.0 / cfg.sample_rate as f64);
    Ok((g.mul_scalar(f1, inv_fs), g.mul_scalar(f2, inv_fs)))
}

/// Kernels from the unconstrained `[C x 1]` parameters, differentiable with
/// respect to both.
pub fn sinc_kernels<T: Scalar>(
    g: &mut Graph<T>,
    low_hz: Var,
    band_hz: Var,
    cfg: &SincConfig,
) -> Result<Var> {
    let (f1, f2) = normalized_cutoffs(g, low_hz, band_hz, cfg)?;
    bandpass_kernels(g, f1, f2, cfg)
}

/// Left halves (see [`bandpass_half_kernels`]) of [`sinc_kernels`].
pub fn sinc_half_kernels<T: Scalar>(
    g: &mut Graph<T>,
    low_hz: Var,
    band_hz: Var,
    cfg: &SincConfig,
) -> Result<Var> {
    let (f1, f2) = normalized_cutoffs(g, low_hz, band_hz, cfg)?;
    bandpass_half_kernels(g, f1, f2, cfg)
}

/// LFB stream from the `[N x 1]` signal and `[C x (L+1)/2]` half kernels:
/// filter ("same" padding), rectify, average-pool to frames, log-compress.
pub fn lfb_from_half_kernels<T: Scalar>(
    g: &mut Graph<T>,
    signal: Var,
    half: Var,
    cfg: &SincConfig,
) -> Result<Var> {
    let [n, _] = g.shape(signal);
    frame_count(n, cfg.frame_win, cfg.frame_hop)?;
    let pooled = g.fir_abs_pool(signal, half, cfg.frame_win, cfg.frame_hop)?;
    let floored = g.add_scalar(pooled, T::of(cfg.eps));
    Ok(g.ln(floored))
}

pub fn signal_tensor<T: Scalar>(buf: &AudioBuffer) -> Tensor<T> {
    Tensor::col(buf.samples().iter().map(|&s| T::of(s as f64)).collect())
}

fn check_rate(buf: &AudioBuffer, cfg: &SincConfig) -> Result<()> {
    if buf.sample_rate_hz() != cfg.sample_rate {
        return Err(Error::Config(format!(
            "{}: sample rate {} Hz, filterbank expects {} Hz",
            buf.source_path,
            buf.sample_rate_hz(),
            cfg.sample_rate
        )));
    }
    Ok(())
}

/// `[frames x C]` LFB features with the filterbank's current cutoffs.
pub fn lfb_features<T: Scalar>(buf: &AudioBuffer, fb: &SincFilterbank<T>) -> Result<Tensor<T>> {
    check_rate(buf, &fb.cfg)?;
    let mut g = Graph::new();
    let low = g.constant(fb.low_hz.clone());
    let band = g.constant(fb.band_hz.clone());
    let half = sinc_half_kernels(&mut g, low, band, &fb.cfg)?;
    let signal = g.constant(signal_tensor(buf));
    let out = lfb_from_half_kernels(&mut g, signal, half, &fb.cfg)?;
    Ok(g.value(out).clone())
}

/// Common frame count of the two streams. They may differ by at most one
/// frame; anything else means the framing configurations disagree.
pub fn aligned_frames(t_stft: usize, t_lfb: usize) -> Result<usize> {
    let t = t_stft.min(t_lfb);
    if t_stft.abs_diff(t_lfb) > 1 {
        return Err(Error::Config(format!(
            "feature streams disagree: {t_stft} STFT frames vs {t_lfb} LFB frames"
        )));
    }
    if t == 0 {
        return Err(Error::TooShort(
            "feature streams have no overlapping frames".into(),
        ));
    }
    Ok(t)
}

/// Time-aligned STFT and LFB features of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePair<T> {
    pub stft: Tensor<T>,
    pub lfb: Tensor<T>,
}

impl<T: Scalar> FeaturePair<T> {
    pub fn num_frames(&self) -> usize {
        self.stft.rows()
    }
}

fn trim_rows<T: Scalar>(x: &Tensor<T>, rows: usize) -> Tensor<T> {
    Tensor::new(rows, x.cols(), x.data()[..rows * x.cols()].to_vec())
}

/// Trims both streams to their common frame count.
pub fn align<T: Scalar>(stft: &Tensor<T>, lfb: &Tensor<T>) -> Result<FeaturePair<T>> {
    let t = aligned_frames(stft.rows(), lfb.rows())?;
    let pair = FeaturePair {
        stft: trim_rows(stft, t),
        lfb: trim_rows(lfb, t),
    };
    if !(pair.stft.all_finite() && pair.lfb.all_finite()) {
        return Err(Error::Degenerate("non-finite feature values".into()));
    }
    Ok(pair)
}

pub fn extract<T: Scalar>(
    buf: &AudioBuffer,
    stft: &Stft,
    fb: &SincFilterbank<T>,
) -> Result<FeaturePair<T>> {
    align(&stft.features(buf.samples())?, &lfb_features(buf, fb)?)
}
