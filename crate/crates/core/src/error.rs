use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("invalid interaction set: {0}")]
    InvalidData(String),

    #[error("dataset too sparse: no interactions survive a minimum degree of {k}")]
    TooSparse { k: usize },

    #[error("user {user} would keep no training interactions under the per-user split")]
    EmptyUserSplit { user: u32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("training diverged at epoch {epoch} (objective = {value})")]
    Divergence { epoch: usize, value: f64 },

    #[error("no collaborative signal for ({user}, {item}): neither the user nor the item keeps a rating")]
    NoCollaborativeSignal { user: u32, item: u32 },

    #[error("missing surrogate for interaction ({user}, {item})")]
    MissingSurrogate { user: u32, item: u32 },

    #[error("conjugate gradients hit a non-finite value at iteration {iteration}; raise the damping")]
    NonFinite { iteration: usize },

    #[error("operator is not positive definite (curvature {curvature:e} at iteration {iteration}); raise the damping")]
    NotPositiveDefinite { iteration: usize, curvature: f64 },

    #[error("request is invalid: {0}")]
    Request(String),

    #[error("attack set is missing the {0} class")]
    EmptyClass(&'static str),

    #[error("degenerate block: {0}")]
    Degenerate(String),

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
