use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("degenerate schedule: all task weights are zero at t={t}")]
    DegenerateSchedule { t: u64 },

    #[error("{dataset}: record {line}: {reason}")]
    Record {
        dataset: String,
        line: usize,
        reason: String,
    },

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("vocab: {0}")]
    Vocab(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of range for vocab of size {vocab}")]
    TokenRange { id: u32, vocab: usize },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("dataset {dataset} failed at cursor {cursor}: {reason}")]
    DatasetRead {
        dataset: String,
        cursor: usize,
        reason: String,
    },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("missing input {}: {hint}", path.display())]
    MissingInput { path: PathBuf, hint: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Configuration and usage errors map to exit code 2, everything else to 1.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidSchedule(_) | Error::Config(_) | Error::MissingInput { .. }
        )
    }
}
