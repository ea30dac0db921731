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

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch ({what}): expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("prompt requires {required} tokens but max_seq is {max_seq}")]
    SequenceOverflow { required: usize, max_seq: usize },

    #[error("retrieval for anchor {anchor}: {message}")]
    Retrieval { anchor: String, message: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (anchors: {anchors:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        anchors: Vec<String>,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::SequenceOverflow { .. } => "sequence_overflow",
            Error::Retrieval { .. } => "retrieval",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Json(_) => "json",
        }
    }
}
