//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "DGESICKP" version element-bytes
//! len config-text          resolved configuration, INI form
//! len progress-text        counters, `key = value` lines
//! count { len name rows cols values... }
//! ```
//!
//! Tensor names are prefixed `param/`, `adam.m/`, `adam.v/` and `best/`.
//! Values are stored in the element type of the run (4 or 8 bytes). Every
//! float in the text sections is written in shortest round-trip form, so a
//! load followed by a save reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use crate::audio::IngestOptions;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ParamStore};
use crate::tensor::{Scalar, Tensor};

use super::{AdamState, Progress, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DGESICKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub params: ParamStore<T>,
    pub adam: Option<AdamState<T>>,
    pub progress: Progress,
    /// Best-validation parameters of an unfinished run.
    pub best: Option<ParamStore<T>>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn push_text(out: &mut Vec<u8>, s: &str) {
    push_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn text(&mut self) -> Result<&'a str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| bad("text section is not UTF-8"))
    }
}

fn progress_text(p: &Progress, adam_step: u64) -> String {
    format!(
        "epoch = {}\nstep = {}\nbest_val_loss = {}\nbad_epochs = {}\nlast_train_loss = {}\nadam_step = {}\n",
        p.epoch, p.step, p.best_val_loss, p.bad_epochs, p.last_train_loss, adam_step
    )
}

fn parse_progress(text: &str) -> Result<(Progress, u64)> {
    let mut map = std::collections::HashMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed progress line `{line}`")))?;
        map.insert(k.trim(), v.trim());
    }
    fn field<V: std::str::FromStr>(
        map: &std::collections::HashMap<&str, &str>,
        k: &str,
    ) -> Result<V> {
        map.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("missing or invalid progress field `{k}`")))
    }
    let p = Progress {
        epoch: field(&map, "epoch")?,
        step: field(&map, "step")?,
        best_val_loss: field(&map, "best_val_loss")?,
        bad_epochs: field(&map, "bad_epochs")?,
        last_train_loss: field(&map, "last_train_loss")?,
    };
    Ok((p, field(&map, "adam_step")?))
}

/// Element width recorded in a checkpoint's header: `"f32"` or `"f64"`.
pub fn read_dtype(path: impl AsRef<Path>) -> Result<&'static str> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    header(&mut c)
}

fn header(c: &mut Cursor) -> Result<&'static str> {
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(bad(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    match c.u32()? {
        4 => Ok("f32"),
        8 => Ok("f64"),
        n => Err(bad(format!("unsupported element width {n}"))),
    }
}

impl<T: Scalar> Checkpoint<T> {
    /// Resumable snapshot of a run.
    pub fn from_trainer(tr: &Trainer<T>, audio: IngestOptions) -> Self {
        Checkpoint {
            config: RunConfig {
                model: tr.model.cfg,
                stft: tr.model.stft,
                sinc: tr.model.sinc,
                train: tr.cfg,
                audio,
            },
            params: tr.model.params.clone(),
            adam: Some(tr.adam.clone()),
            progress: tr.progress,
            best: Some(tr.best.clone()),
        }
    }

    /// Inference-only snapshot of the run's best parameters.
    pub fn best_of(tr: &Trainer<T>, audio: IngestOptions) -> Self {
        Checkpoint {
            params: tr.best.clone(),
            adam: None,
            best: None,
            ..Checkpoint::from_trainer(tr, audio)
        }
    }

    pub fn model(&self) -> Model<T> {
        Model {
            cfg: self.config.model,
            stft: self.config.stft,
            sinc: self.config.sinc,
            params: self.params.clone(),
        }
    }

    pub fn into_trainer(self) -> Result<Trainer<T>> {
        let model = self.model();
        let adam = self
            .adam
            .ok_or_else(|| bad("no optimiser state; the checkpoint cannot resume training"))?;
        let mut tr = Trainer::new(model, self.config.train)?;
        tr.adam = adam;
        tr.progress = self.progress;
        if let Some(best) = self.best {
            tr.best = best;
        }
        Ok(tr)
    }

    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = self
            .params
            .iter()
            .map(|(n, t)| (format!("param/{n}"), t))
            .collect();
        if let Some(adam) = &self.adam {
            for (prefix, moments) in [("adam.m", &adam.m), ("adam.v", &adam.v)] {
                for ((n, _), t) in self.params.iter().zip(moments) {
                    out.push((format!("{prefix}/{n}"), t));
                }
            }
        }
        if let Some(best) = &self.best {
            out.extend(best.iter().map(|(n, t)| (format!("best/{n}"), t)));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        push_u32(&mut out, CHECKPOINT_VERSION as usize);
        push_u32(&mut out, T::BYTES);
        push_text(&mut out, &self.config.to_ini());
        let adam_step = self.adam.as_ref().map_or(0, |a| a.step);
        push_text(&mut out, &progress_text(&self.progress, adam_step));
        let tensors = self.tensors();
        push_u32(&mut out, tensors.len());
        for (name, t) in tensors {
            push_text(&mut out, &name);
            push_u32(&mut out, t.rows());
            push_u32(&mut out, t.cols());
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        let dtype = header(&mut c)?;
        if dtype != T::DTYPE {
            return Err(bad(format!("stored as {dtype}, requested {}", T::DTYPE)));
        }
        let config = RunConfig::from_ini(c.text()?)?;
        let (progress, adam_step) = parse_progress(c.text()?)?;
        let count = c.u32()?;
        let (mut params, mut m, mut v, mut best) =
            (ParamStore::new(), Vec::new(), Vec::new(), ParamStore::new());
        for _ in 0..count {
            let name = c.text()?.to_string();
            let (rows, cols) = (c.u32()?, c.u32()?);
            let len = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(T::BYTES))
                .ok_or_else(|| bad("tensor size overflows"))?;
            let data = c
                .take(len)?
                .chunks_exact(T::BYTES)
                .map(T::read_le)
                .collect();
            let t = Tensor::new(rows, cols, data);
            let (prefix, leaf) = name
                .split_once('/')
                .ok_or_else(|| bad(format!("unprefixed tensor `{name}`")))?;
            match prefix {
                "param" => params.insert(leaf, t),
                "adam.m" => m.push((leaf.to_string(), t)),
                "adam.v" => v.push((leaf.to_string(), t)),
                "best" => best.insert(leaf, t),
                _ => return Err(bad(format!("unknown tensor section `{prefix}`"))),
            }
        }
        if c.pos != bytes.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        let ckpt_model = Model {
            cfg: config.model,
            stft: config.stft,
            sinc: config.sinc,
            params,
        };
        ckpt_model.validate()?;
        let params = ckpt_model.params;
        let names: Vec<&str> = params.names().collect();
        let aligned = |moments: &[(String, Tensor<T>)]| {
            moments.len() == names.len()
                && moments
                    .iter()
                    .zip(params.iter())
                    .all(|((n, t), (pn, p))| n == pn && t.shape() == p.shape())
        };
        let adam = match (m.is_empty(), v.is_empty()) {
            (true, true) => None,
            _ if aligned(&m) && aligned(&v) => Some(AdamState {
                step: adam_step,
                m: m.into_iter().map(|(_, t)| t).collect(),
                v: v.into_iter().map(|(_, t)| t).collect(),
            }),
            _ => return Err(bad("optimiser moments do not match the parameters")),
        };
        let best = if best.is_empty() {
            None
        } else {
            let b = Model {
                params: best,
                cfg: config.model,
                stft: config.stft,
                sinc: config.sinc,
            };
            b.validate()?;
            Some(b.params)
        };
        Ok(Checkpoint {
            config,
            params,
            adam,
            progress,
            best,
        })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Model stored at `path`, converting the element type if needed.
    pub fn load_model(path: impl AsRef<Path>) -> Result<(RunConfig, Model<T>)> {
        let path = path.as_ref();
        Ok(match read_dtype(path)? {
            "f32" => {
                let c = Checkpoint::<f32>::load(path)?;
                (c.config, c.model().cast())
            }
            _ => {
                let c = Checkpoint::<f64>::load(path)?;
                (c.config, c.model().cast())
            }
        })
    }
}
