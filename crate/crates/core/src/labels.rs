//! Regression targets: CSV manifests of precomputed scores, and a synthetic
//! dataset scored by a simple intrusive oracle.
//!
//! The oracle is not GESI. It compares clean and degraded band envelopes in
//! eight octave bands and maps their mean correlation to [0, 1], which is
//! enough to exercise training and evaluation without external data.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::audio::{write_wav_pcm16, AudioBuffer, MODEL_SAMPLE_RATE};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 3] = ["audio_path", "target", "split"];
pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
    Unseen,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::Unseen];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unseen => "unseen",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown split `{s}` (expected train, val, test or unseen)"
                ))
            })
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub audio_path: PathBuf,
    pub target: f64,
    pub split: Split,
}

/// Reads a `audio_path,target,split` manifest. Relative audio paths are
/// resolved against the manifest's directory and must exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let bad = |line: usize, reason: String| Error::Manifest {
        path: path.into(),
        line,
        reason,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut records = reader.records();
    match records.next() {
        None => return Err(Error::EmptyManifest(path.into())),
        Some(Err(e)) => return Err(bad(1, e.to_string())),
        Some(Ok(h)) if h.iter().ne(MANIFEST_HEADER) => {
            return Err(bad(
                1,
                format!("header must be `{}`", MANIFEST_HEADER.join(",")),
            ))
        }
        Some(Ok(_)) => {}
    }
    let mut entries = Vec::new();
    for record in records {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            bad(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 3 {
            return Err(bad(
                line,
                format!("expected 3 fields, found {}", record.len()),
            ));
        }
        let target: f64 = record[1]
            .parse()
            .map_err(|_| bad(line, format!("target `{}` is not a number", &record[1])))?;
        if !(0.0..=1.0).contains(&target) {
            return Err(bad(line, format!("target {target} outside [0, 1]")));
        }
        let split = Split::parse(&record[2]).map_err(|e| bad(line, e.to_string()))?;
        let audio_path = base.join(&record[0]);
        if !audio_path.is_file() {
            return Err(bad(
                line,
                format!("audio file {} not found", audio_path.display()),
            ));
        }
        entries.push(ManifestEntry {
            audio_path,
            target,
            split,
        });
    }
    if entries.is_empty() {
        return Err(Error::EmptyManifest(path.into()));
    }
    Ok(entries)
}

/// Writes a manifest. Audio paths are written as given, so they should be
/// relative to the manifest's directory or absolute.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = MANIFEST_HEADER.join(",");
    out.push('\n');
    for e in entries {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        w.write_record([
            e.audio_path.to_string_lossy().as_ref(),
            &e.target.to_string(),
            e.split.name(),
        ])
        .and_then(|_| w.flush().map_err(Into::into))
        .map_err(|e| Error::Config(e.to_string()))?;
        out.push_str(&String::from_utf8_lossy(&w.into_inner().expect("flushed")));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn split_counts(entries: &[ManifestEntry]) -> Vec<(Split, usize)> {
    Split::ALL
        .into_iter()
        .map(|s| (s, entries.iter().filter(|e| e.split == s).count()))
        .collect()
}

pub fn select(entries: &[ManifestEntry], split: Split) -> Vec<ManifestEntry> {
    entries
        .iter()
        .filter(|e| e.split == split)
        .cloned()
        .collect()
}

/// SplitMix64 finaliser, used to derive independent sub-seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of item `index` under `master`.
pub fn sub_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

pub const SNR_RANGE_DB: (f64, f64) = (-10.0, 15.0);
pub const DURATION_RANGE_S: (f64, f64) = (1.0, 4.0);
pub const NUM_BANDS: usize = 8;
/// Lower edge of the lowest octave band; the top band ends at 8 kHz.
pub const LOWEST_BAND_HZ: f64 = 31.25;
const ENV_WIN: usize = 256;
const ENV_HOP: usize = 128;
const CLEAN_RMS: f64 = 0.05;
const PEAK_LIMIT: f64 = 0.99;

/// Chance level of the envelope correlation: mean plus `FLOOR_SIGMAS`
/// standard deviations over clean carriers scored against independent white
/// noise. Frozen from `estimate_noise_floor(1000, 20_251_016)`: mean
/// 0.000211, standard deviation 0.032817, largest trial 0.1152.
pub const NOISE_FLOOR_R: f64 = 0.098662;
pub const FLOOR_SIGMAS: f64 = 3.0;

/// One generated utterance.
#[derive(Clone, Debug)]
pub struct SynthUtterance {
    pub clean: Vec<f32>,
    /// Mixture as stored on disk (PCM-16 quantised).
    pub degraded: Vec<f32>,
    pub snr_db: f64,
    pub target: f64,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Harmonic complex plus noise, both with slow, deep amplitude modulation,
/// at RMS `CLEAN_RMS`.
fn clean_carrier(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    use std::f64::consts::TAU;
    let fs = MODEL_SAMPLE_RATE as f64;
    let f0 = rng.random_range(100.0..250.0);
    let harmonics = (3500.0 / f0) as usize;
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..TAU)).collect();
    let (fm_tone, ph_tone) = (rng.random_range(2.0..6.0), rng.random_range(0.0..TAU));
    let (fm_noise, ph_noise) = (rng.random_range(3.0..8.0), rng.random_range(0.0..TAU));
    let noise_gain = rng.random_range(0.3..1.0);
    let noise = gaussian(rng, n);
    let tone_rms = (0.5 * (1..=harmonics).map(|k| 1.0 / (k * k) as f64).sum::<f64>()).sqrt();
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            let env = |fm: f64, ph: f64| (0.5 + 0.5 * (TAU * fm * t + ph).sin()).powi(2);
            let tone: f64 = phases
                .iter()
                .enumerate()
                .map(|(k, &p)| (TAU * f0 * (k + 1) as f64 * t + p).sin() / (k + 1) as f64)
                .sum();
            env(fm_tone, ph_tone) * tone / tone_rms
                + noise_gain * env(fm_noise, ph_noise) * noise[i]
        })
        .collect();
    let scale = CLEAN_RMS / rms(&x);
    x.iter_mut().for_each(|v| *v *= scale);
    x
}

fn quantize_pcm16(x: f64) -> f32 {
    ((x * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0) as f32
}

/// Generates utterance `seed`: a random carrier mixed with white noise at an
/// SNR drawn uniformly from `SNR_RANGE_DB`.
pub fn synth_utterance(seed: u64) -> SynthUtterance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let snr_db = rng.random_range(SNR_RANGE_DB.0..SNR_RANGE_DB.1);
    synth_at_snr(&mut rng, snr_db)
}

/// As [`synth_utterance`] with a fixed SNR.
pub fn synth_utterance_at(seed: u64, snr_db: f64) -> SynthUtterance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let _: f64 = rng.random_range(SNR_RANGE_DB.0..SNR_RANGE_DB.1);
    synth_at_snr(&mut rng, snr_db)
}

fn synth_at_snr(rng: &mut ChaCha8Rng, snr_db: f64) -> SynthUtterance {
    let secs = rng.random_range(DURATION_RANGE_S.0..DURATION_RANGE_S.1);
    let n = (secs * MODEL_SAMPLE_RATE as f64) as usize;
    let clean = clean_carrier(rng, n);
    let noise = gaussian(rng, n);
    let noise_scale = CLEAN_RMS / 10f64.powf(snr_db / 20.0);
    let mut mix: Vec<f64> = clean
        .iter()
        .zip(&noise)
        .map(|(c, z)| c + noise_scale * z)
        .collect();
    let peak = mix.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > PEAK_LIMIT {
        PEAK_LIMIT / peak
    } else {
        1.0
    };
    mix.iter_mut().for_each(|v| *v *= gain);
    let clean: Vec<f32> = clean.iter().map(|&c| (c * gain) as f32).collect();
    let degraded: Vec<f32> = mix.iter().map(|&v| quantize_pcm16(v)).collect();
    let target = oracle_score(&clean, &degraded);
    SynthUtterance {
        clean,
        degraded,
        snr_db,
        target,
    }
}

/// Octave band edges in Hz, `LOWEST_BAND_HZ * 2^k` for `k = 0..=NUM_BANDS`.
pub fn band_edges() -> [f64; NUM_BANDS + 1] {
    std::array::from_fn(|k| LOWEST_BAND_HZ * (1u32 << k) as f64)
}

/// Frame RMS envelopes of `x` in each octave band (ideal FFT band-pass).
fn band_envelopes(x: &[f32]) -> Vec<Vec<f64>> {
    let n = x.len().next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let (fwd, inv) = (planner.plan_fft_forward(n), planner.plan_fft_inverse(n));
    let mut spec: Vec<Complex<f64>> = x
        .iter()
        .map(|&v| Complex::new(v as f64, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(n)
        .collect();
    fwd.process(&mut spec);
    let bin_hz = MODEL_SAMPLE_RATE as f64 / n as f64;
    let edges = band_edges();
    edges
        .windows(2)
        .map(|e| {
            let mut band: Vec<Complex<f64>> = spec
                .iter()
                .enumerate()
                .map(|(k, &z)| {
                    let f = k.min(n - k) as f64 * bin_hz;
                    if f >= e[0] && f < e[1] {
                        z
                    } else {
                        Complex::new(0.0, 0.0)
                    }
                })
                .collect();
            inv.process(&mut band);
            let y: Vec<f64> = band[..x.len()].iter().map(|z| z.re).collect();
            frame_rms(&y)
        })
        .collect()
}

fn frame_rms(y: &[f64]) -> Vec<f64> {
    if y.len() < ENV_WIN {
        return vec![rms(y)];
    }
    (0..=(y.len() - ENV_WIN) / ENV_HOP)
        .map(|f| rms(&y[f * ENV_HOP..f * ENV_HOP + ENV_WIN]))
        .collect()
}

/// Pearson correlation, 0 when either side has no variance.
fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Mean over the octave bands of the clean/degraded envelope correlation.
pub fn envelope_correlation(clean: &[f32], degraded: &[f32]) -> f64 {
    assert_eq!(clean.len(), degraded.len(), "signals must be aligned");
    let (ec, ed) = (band_envelopes(clean), band_envelopes(degraded));
    ec.iter().zip(&ed).map(|(a, b)| pearson(a, b)).sum::<f64>() / NUM_BANDS as f64
}

/// Maps a mean envelope correlation to [0, 1]: the noise floor goes to 0 and
/// perfect correlation to 1.
pub fn calibrate(r: f64) -> f64 {
    ((r - NOISE_FLOOR_R) / (1.0 - NOISE_FLOOR_R)).clamp(0.0, 1.0)
}

pub fn oracle_score(clean: &[f32], degraded: &[f32]) -> f64 {
    calibrate(envelope_correlation(clean, degraded))
}

/// Envelope correlations of `trials` clean carriers against independent
/// white noise of the same length.
pub fn noise_floor_trials(trials: usize, seed: u64) -> Vec<f64> {
    (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, i));
            let secs = rng.random_range(DURATION_RANGE_S.0..DURATION_RANGE_S.1);
            let n = (secs * MODEL_SAMPLE_RATE as f64) as usize;
            let clean: Vec<f32> = clean_carrier(&mut rng, n)
                .iter()
                .map(|&v| v as f32)
                .collect();
            let noise: Vec<f32> = gaussian(&mut rng, n)
                .iter()
                .map(|&v| quantize_pcm16(v * CLEAN_RMS))
                .collect();
            envelope_correlation(&clean, &noise)
        })
        .collect()
}

/// Monte-Carlo chance level: mean plus `FLOOR_SIGMAS` standard deviations
/// of [`noise_floor_trials`].
pub fn estimate_noise_floor(trials: usize, seed: u64) -> f64 {
    let r = noise_floor_trials(trials, seed);
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let sd = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    mean + FLOOR_SIGMAS * sd
}

/// Split labels for `n` items: 80/10/10 via [`crate::training::split_dataset`]
/// when there are enough items, otherwise everything is training data.
fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut splits = vec![Split::Train; n];
    if let Ok(parts) = crate::training::split_indices(n, crate::training::SPLIT_RATIOS, seed) {
        for &i in &parts.val {
            splits[i] = Split::Val;
        }
        for &i in &parts.test {
            splits[i] = Split::Test;
        }
    }
    splits
}

/// Writes `n` synthetic utterances (`utt_00000.wav`, ...) and
/// `manifest.csv` to `out_dir`. Output is byte-identical for a given seed.
pub fn synth_dataset(n: usize, seed: u64, out_dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let out_dir = out_dir.as_ref();
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs n > 0".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let splits = assign_splits(n, seed);
    let relative: Vec<ManifestEntry> = (0..n)
        .into_par_iter()
        .map(|i| {
            let utt = synth_utterance(sub_seed(seed, i as u64));
            let name = format!("utt_{i:05}.wav");
            let buf = AudioBuffer::new(utt.degraded, MODEL_SAMPLE_RATE, name.clone())?;
            write_wav_pcm16(out_dir.join(&name), &buf)?;
            Ok(ManifestEntry {
                audio_path: PathBuf::from(name),
                target: utt.target,
                split: splits[i],
            })
        })
        .collect::<Result<_>>()?;
    write_manifest(out_dir.join(MANIFEST_FILE), &relative)?;
    Ok(relative
        .into_iter()
        .map(|e| ManifestEntry {
            audio_path: out_dir.join(e.audio_path),
            ..e
        })
        .collect())
}
