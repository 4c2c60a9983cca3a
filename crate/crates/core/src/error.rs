use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HbafError>;

#[derive(Debug, Error)]
pub enum HbafError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("unknown label {0}")]
    UnknownLabel(String),

    #[error("invalid label set: {0}")]
    InvalidLabelSet(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed record {path}: {message}")]
    Record { path: PathBuf, message: String },

    #[error("degenerate representation: {0}")]
    Degenerate(String),

    #[error("contrastive batch needs at least 2 samples, got {0}")]
    TooFewSamples(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl HbafError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HbafError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numbers rather than inputs or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(self, HbafError::NonFinite(_) | HbafError::Degenerate(_))
    }
}
