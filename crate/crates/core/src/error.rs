use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: unreadable WAV file: {reason}")]
    UnreadableWav { path: PathBuf, reason: String },

    #[error("{path}: unsupported encoding: {encoding}")]
    UnsupportedEncoding { path: PathBuf, encoding: String },

    #[error("{path}: audio has zero length")]
    EmptyAudio { path: PathBuf },

    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("input too short: {0}")]
    TooShort(String),

    #[error("{path}: line {line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{0}: no entries")]
    EmptyManifest(PathBuf),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("undefined statistic: {0}")]
    Degenerate(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics (divergence, non-finite values,
    /// undefined correlations) rather than by bad input data.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient(_) | Error::Diverged { .. } | Error::Degenerate(_)
        )
    }
}
