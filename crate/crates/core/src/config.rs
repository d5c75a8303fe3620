//! Flat `section.key = value` configuration covering every tunable of the
//! pipeline. The same text form is used for config files, the resolved
//! config echoed into run directories, and checkpoint headers.

use std::fmt::Display;
use std::str::FromStr;

use crate::audio::IngestOptions;
use crate::error::{Error, Result};
use crate::features::{SincConfig, StftConfig, WindowKind};
use crate::model::{Activation, ModelConfig, PositionalEncoding};
use crate::training::{Precision, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub stft: StftConfig,
    pub sinc: SincConfig,
    pub train: TrainConfig,
    pub audio: IngestOptions,
}

fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn opt<V: FromStr>(key: &str, v: &str) -> Result<Option<V>> {
    if v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn show_opt<V: Display>(v: Option<V>) -> String {
    v.map_or_else(|| "none".to_string(), |v| v.to_string())
}

impl RunConfig {
    /// Every key with its current value, in a fixed order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let (m, s, f, t, a) = (
            &self.model,
            &self.stft,
            &self.sinc,
            &self.train,
            &self.audio,
        );
        vec![
            ("model.d_model", m.d_model.to_string()),
            ("model.n_heads", m.n_heads.to_string()),
            ("model.n_blocks", m.n_blocks.to_string()),
            ("model.maxout_pieces", m.maxout_pieces.to_string()),
            ("model.conv_channels", m.conv_channels.to_string()),
            ("model.conv_kernel", m.conv_kernel.to_string()),
            ("model.conv_stride", m.conv_stride.to_string()),
            ("model.activation", m.activation.to_string()),
            (
                "model.positional_encoding",
                m.positional_encoding.to_string(),
            ),
            ("model.max_learned_len", m.max_learned_len.to_string()),
            ("stft.win_length", s.win_length.to_string()),
            ("stft.hop_length", s.hop_length.to_string()),
            ("stft.fft_size", s.fft_size.to_string()),
            ("stft.window", s.window.name().to_string()),
            ("stft.eps", s.eps.to_string()),
            ("sinc.num_filters", f.num_filters.to_string()),
            ("sinc.kernel_length", f.kernel_length.to_string()),
            ("sinc.sample_rate", f.sample_rate.to_string()),
            ("sinc.min_hz", f.min_hz.to_string()),
            ("sinc.min_band_hz", f.min_band_hz.to_string()),
            ("sinc.frame_win", f.frame_win.to_string()),
            ("sinc.frame_hop", f.frame_hop.to_string()),
            ("sinc.eps", f.eps.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.alpha", t.alpha.to_string()),
            ("train.max_epochs", t.max_epochs.to_string()),
            ("train.patience", t.patience.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.adam_beta1", t.adam_beta1.to_string()),
            ("train.adam_beta2", t.adam_beta2.to_string()),
            ("train.adam_eps", t.adam_eps.to_string()),
            ("train.clip_norm", show_opt(t.clip_norm)),
            ("train.max_steps", show_opt(t.max_steps)),
            ("train.stop_below", show_opt(t.stop_below)),
            ("train.precision", t.precision.name().to_string()),
            ("audio.normalize_rms", show_opt(a.normalize_rms)),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        RunConfig::default()
            .pairs()
            .into_iter()
            .map(|(k, _)| k)
            .collect()
    }

    /// Sets one field from its text form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, s, f, t, a) = (
            &mut self.model,
            &mut self.stft,
            &mut self.sinc,
            &mut self.train,
            &mut self.audio,
        );
        match key {
            "model.d_model" => m.d_model = num(key, v)?,
            "model.n_heads" => m.n_heads = num(key, v)?,
            "model.n_blocks" => m.n_blocks = num(key, v)?,
            "model.maxout_pieces" => m.maxout_pieces = num(key, v)?,
            "model.conv_channels" => m.conv_channels = num(key, v)?,
            "model.conv_kernel" => m.conv_kernel = num(key, v)?,
            "model.conv_stride" => m.conv_stride = num(key, v)?,
            "model.activation" => m.activation = Activation::parse(v)?,
            "model.positional_encoding" => m.positional_encoding = PositionalEncoding::parse(v)?,
            "model.max_learned_len" => m.max_learned_len = num(key, v)?,
            "stft.win_length" => s.win_length = num(key, v)?,
            "stft.hop_length" => s.hop_length = num(key, v)?,
            "stft.fft_size" => s.fft_size = num(key, v)?,
            "stft.window" => s.window = WindowKind::parse(v)?,
            "stft.eps" => s.eps = num(key, v)?,
            "sinc.num_filters" => f.num_filters = num(key, v)?,
            "sinc.kernel_length" => f.kernel_length = num(key, v)?,
            // The filterbank rate is also the rate audio is resampled to.
            "sinc.sample_rate" => {
                f.sample_rate = num(key, v)?;
                a.target_sr = f.sample_rate;
            }
            "sinc.min_hz" => f.min_hz = num(key, v)?,
            "sinc.min_band_hz" => f.min_band_hz = num(key, v)?,
            "sinc.frame_win" => f.frame_win = num(key, v)?,
            "sinc.frame_hop" => f.frame_hop = num(key, v)?,
            "sinc.eps" => f.eps = num(key, v)?,
            "train.lr" => t.lr = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.alpha" => t.alpha = num(key, v)?,
            "train.max_epochs" => t.max_epochs = num(key, v)?,
            "train.patience" => t.patience = num(key, v)?,
            "train.seed" => t.seed = num(key, v)?,
            "train.adam_beta1" => t.adam_beta1 = num(key, v)?,
            "train.adam_beta2" => t.adam_beta2 = num(key, v)?,
            "train.adam_eps" => t.adam_eps = num(key, v)?,
            "train.clip_norm" => t.clip_norm = opt(key, v)?,
            "train.max_steps" => t.max_steps = opt(key, v)?,
            "train.stop_below" => t.stop_below = opt(key, v)?,
            "train.precision" => t.precision = Precision::parse(v)?,
            "audio.normalize_rms" => a.normalize_rms = opt(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.pairs()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
    }

    /// Applies INI-style text: `key = value` lines, optional `[section]`
    /// headers that prefix the keys below them, `#` or `;` comments.
    pub fn apply_ini(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            let at = |e: Error| Error::Config(format!("line {}: {e}", i + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                at(Error::Config(format!(
                    "expected `key = value`, got `{line}`"
                )))
            })?;
            let (k, v) = (k.trim(), v.trim());
            let key = if section.is_empty() || k.contains('.') {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            self.set(&key, v).map_err(at)?;
        }
        Ok(())
    }

    pub fn from_ini(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_ini(text)?;
        Ok(cfg)
    }

    /// Sectioned INI text that [`RunConfig::from_ini`] reads back exactly.
    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.pairs() {
            let (sec, name) = key.split_once('.').expect("sectioned key");
            if sec != section {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{sec}]\n"));
                section = sec;
            }
            out.push_str(&format!("{name} = {value}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stft.validate()?;
        self.sinc.validate()?;
        self.train.validate()?;
        if self.sinc.sample_rate != self.audio.target_sr {
            return Err(Error::Config(format!(
                "filterbank sample rate {} Hz differs from the ingest rate {} Hz",
                self.sinc.sample_rate, self.audio.target_sr
            )));
        }
        Ok(())
    }

    pub fn ingest_options(&self) -> IngestOptions {
        IngestOptions {
            target_sr: self.sinc.sample_rate,
            ..self.audio
        }
    }
}
