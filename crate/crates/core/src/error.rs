use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{0} already exists (pass --force to overwrite)")]
    AlreadyExists(PathBuf),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("branch {branch} received {modality} input")]
    BranchMismatch { branch: &'static str, modality: &'static str },

    #[error("zero-norm embedding at row {row}")]
    ZeroNorm { row: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("label {label} out of range (expected 0..{classes})")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("unavailable: {0}")]
    Unavailable(String),

    #[error("data leakage: {0}")]
    Leakage(String),

    #[error("serialization: {0}")]
    Serde(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
