//! WAV input/output and sample-rate conversion.
//!
//! Everything downstream of this module works on mono 16 kHz `f32` samples.
//! PCM-16 is decoded by dividing by 32768, so a write/read round trip of any
//! decoded PCM-16 buffer is exact.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// Sample rate every model input is converted to.
pub const MODEL_SAMPLE_RATE: u32 = 16_000;

const KAISER_BETA: f64 = 8.6;
const TAPS_PER_PHASE: usize = 64;
/// Anti-aliasing cutoff as a fraction of the lower of the two Nyquist rates.
const ROLLOFF: f64 = 0.9;
/// Above this many phases the filter is evaluated per output sample instead of
/// tabulated.
const MAX_TABLE_PHASES: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate_hz: u32,
    pub source_path: String,
}

impl AudioBuffer {
    pub fn new(
        samples: Vec<f32>,
        sample_rate_hz: u32,
        source_path: impl Into<String>,
    ) -> Result<Self> {
        let source_path = source_path.into();
        if sample_rate_hz == 0 {
            return Err(Error::Config(format!(
                "{source_path}: sample rate must be positive"
            )));
        }
        if samples.is_empty() {
            return Err(Error::EmptyAudio {
                path: source_path.into(),
            });
        }
        Ok(AudioBuffer {
            samples,
            sample_rate_hz,
            source_path,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

fn unreadable(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(source) => Error::io(path, source),
        hound::Error::Unsupported => Error::UnsupportedEncoding {
            path: path.into(),
            encoding: "format not supported by the WAV decoder".into(),
        },
        other => Error::UnreadableWav {
            path: path.into(),
            reason: other.to_string(),
        },
    }
}

/// Reads a PCM-16, PCM-24 or IEEE-float-32 WAV file, averaging channels to
/// mono and scaling amplitudes to [-1, 1].
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| unreadable(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>(),
        (SampleFormat::Int, 24) => reader
            .into_samples::<i32>()
            .map(|s| s.map(|v| v as f32 / 8_388_608.0))
            .collect::<Result<_, _>>(),
        (SampleFormat::Float, 32) => reader.into_samples::<f32>().collect::<Result<_, _>>(),
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding {
                path: path.into(),
                encoding: format!("{fmt:?} {bits}-bit"),
            })
        }
    }
    .map_err(|e| unreadable(path, e))?;
    if channels == 0 || interleaved.len() < channels {
        return Err(Error::EmptyAudio { path: path.into() });
    }
    let mono: Vec<f32> = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    AudioBuffer::new(mono, spec.sample_rate, path.display().to_string())
}

/// Writes mono PCM-16. Samples are scaled by 32768, rounded and clipped.
pub fn write_wav_pcm16(path: impl AsRef<Path>, buf: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec).map_err(|e| unreadable(path, e))?;
    for &s in &buf.samples {
        let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q).map_err(|e| unreadable(path, e))?;
    }
    w.finalize().map_err(|e| unreadable(path, e))
}

/// Writes mono IEEE-float-32.
pub fn write_wav_f32(path: impl AsRef<Path>, buf: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate_hz,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut w = WavWriter::create(path, spec).map_err(|e| unreadable(path, e))?;
    for &s in &buf.samples {
        w.write_sample(s).map_err(|e| unreadable(path, e))?;
    }
    w.finalize().map_err(|e| unreadable(path, e))
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Normalized taps of the polyphase branch whose fractional delay is `frac`
/// (in input samples). Tap `j` multiplies input sample `base - 31 + j`.
fn branch_taps(frac: f64, cutoff: f64) -> [f64; TAPS_PER_PHASE] {
    let half = (TAPS_PER_PHASE / 2) as f64;
    let norm = bessel_i0(KAISER_BETA);
    let mut taps = [0.0; TAPS_PER_PHASE];
    for (j, tap) in taps.iter_mut().enumerate() {
        let u = frac + (half - 1.0) - j as f64;
        let r = u / half;
        let window = if r.abs() >= 1.0 {
            0.0
        } else {
            bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm
        };
        let x = 2.0 * cutoff * u;
        let sinc = if x.abs() < 1e-12 {
            1.0
        } else {
            (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
        };
        *tap = 2.0 * cutoff * sinc * window;
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Kaiser-windowed sinc polyphase resampler (64 taps per phase, beta 8.6).
///
/// Output length is `round(len * target / source)`; edges replicate the first
/// and last input samples. Equal rates return an identical copy.
pub fn resample(buf: &AudioBuffer, target_hz: u32) -> Result<AudioBuffer> {
    if target_hz == 0 {
        return Err(Error::Config("target sample rate must be positive".into()));
    }
    let src = buf.sample_rate_hz as u64;
    let tgt = target_hz as u64;
    if src == tgt {
        return Ok(buf.clone());
    }
    let g = gcd(src, tgt);
    let (up, down) = (tgt / g, src / g);
    let n_in = buf.samples.len();
    let n_out = ((n_in as f64 * tgt as f64 / src as f64).round() as usize).max(1);
    // cycles per input sample
    let cutoff = 0.5 * ROLLOFF * (tgt as f64 / src as f64).min(1.0);

    let table: Option<Vec<[f64; TAPS_PER_PHASE]>> = (up as usize <= MAX_TABLE_PHASES).then(|| {
        (0..up)
            .map(|p| branch_taps(p as f64 / up as f64, cutoff))
            .collect()
    });
    let last = n_in as i64 - 1;
    let offset = (TAPS_PER_PHASE / 2) as i64 - 1;
    let mut out = Vec::with_capacity(n_out);
    for m in 0..n_out as u64 {
        let pos = m * down;
        let base = (pos / up) as i64;
        let phase = (pos % up) as usize;
        let computed;
        let taps = match &table {
            Some(t) => &t[phase],
            None => {
                computed = branch_taps(phase as f64 / up as f64, cutoff);
                &computed
            }
        };
        let start = base - offset;
        let mut acc = 0.0f64;
        if start >= 0 && start + TAPS_PER_PHASE as i64 - 1 <= last {
            let s = &buf.samples[start as usize..start as usize + TAPS_PER_PHASE];
            for (t, &x) in taps.iter().zip(s) {
                acc += t * x as f64;
            }
        } else {
            for (j, t) in taps.iter().enumerate() {
                let k = (start + j as i64).clamp(0, last) as usize;
                acc += t * buf.samples[k] as f64;
            }
        }
        out.push(acc as f32);
    }
    AudioBuffer::new(out, target_hz, buf.source_path.clone())
}

/// Scales the buffer to the given RMS level; silent buffers are returned
/// unchanged.
pub fn normalize_rms(buf: &AudioBuffer, target_rms: f32) -> AudioBuffer {
    let rms = (buf.samples.iter().map(|&s| (s as f64).powi(2)).sum::<f64>()
        / buf.samples.len() as f64)
        .sqrt();
    if rms == 0.0 {
        return buf.clone();
    }
    let gain = (target_rms as f64 / rms) as f32;
    AudioBuffer {
        samples: buf.samples.iter().map(|&s| s * gain).collect(),
        ..buf.clone()
    }
}

/// Options of the ingestion pipeline applied before feature extraction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IngestOptions {
    pub target_sr: u32,
    /// Optional RMS normalization; off by default.
    pub normalize_rms: Option<f32>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            target_sr: MODEL_SAMPLE_RATE,
            normalize_rms: None,
        }
    }
}

/// Load, resample and (optionally) normalize one file.
pub fn ingest(path: impl AsRef<Path>, opts: &IngestOptions) -> Result<AudioBuffer> {
    let buf = resample(&load_wav(path)?, opts.target_sr)?;
    Ok(match opts.normalize_rms {
        Some(level) => normalize_rms(&buf, level),
        None => buf,
    })
}
