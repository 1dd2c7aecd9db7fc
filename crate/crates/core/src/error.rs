use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] autodiff::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("timestamps not strictly increasing at line {line} ({prev} then {next})")]
    NonMonotonic { line: usize, prev: i64, next: i64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("channel mismatch: layer expects {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("length mismatch: {0}")]
    Length(String),

    #[error("series do not overlap in time")]
    NoOverlap,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("tap `{0}` is not available for this model")]
    TapUnavailable(String),

    #[error("invalid target value {value} at index {index}: expected 0 or 1")]
    InvalidTarget { index: usize, value: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("export validation failed: {0}")]
    Export(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
