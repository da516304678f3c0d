use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite logit at class index {index}")]
    NonFiniteLogit { index: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected} classes, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("scan {scan} has no valid (non-ignored) points")]
    EmptyScan { scan: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("depth coefficient {alpha} below the minimum 1e-4 at scan {scan}, point {point}")]
    NonPositiveAlpha { scan: usize, point: usize, alpha: f64 },

    #[error("logit scale factor {factor} is not positive at scan {scan}, point {point}")]
    NonPositiveScale { scan: usize, point: usize, factor: f64 },

    #[error(
        "cannot select an entropy threshold: {correct} correct and {incorrect} incorrect \
         predictions (both must be non-empty); supply eta manually"
    )]
    DegenerateSplit { correct: usize, incorrect: usize },

    #[error("balanced sampling needs at least 3 correct predictions, got {n_pos}")]
    TooFewPositives { n_pos: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{}: format error at byte offset {offset}: {message}", path.display())]
    Format { path: PathBuf, offset: u64, message: String },

    #[error("{}: {message}", path.display())]
    Validation { path: PathBuf, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// True for failures of the file system itself, as opposed to bad
    /// content or bad parameters.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
