use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum FlError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("{path}: bad IDX magic number (expected {expected:#010x}, found {found:#010x})")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated IDX file (need {needed} bytes, have {actual})")]
    Truncated {
        path: PathBuf,
        needed: usize,
        actual: usize,
    },

    #[error("IDX count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("could not produce a partition without empty clients after {retries} attempts")]
    DegeneratePartition { retries: usize },

    #[error("degenerate update: {0}")]
    DegenerateUpdate(String),

    #[error("bisection found no alpha in (0, 1] for which Krum selects the malicious update")]
    NoAcceptedAlpha,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FlError>;

impl FlError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FlError::Io {
            path: path.into(),
            source,
        }
    }
}
