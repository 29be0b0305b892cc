use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ClvError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ClvError {
    #[error("{path}: line {line}: {message}")]
    CorpusLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: line {line}: missing field `{field}`")]
    MissingField {
        path: PathBuf,
        line: usize,
        field: String,
    },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("empty token sequence")]
    EmptySequence,

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("cosine similarity undefined for a zero-norm row")]
    ZeroNorm,

    #[error("non-finite {component} at step {step}")]
    NonFinite { step: usize, component: String },

    #[error("line {line}: {message}")]
    Misaligned { line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Nli(#[from] crate::evaluation::nli::NliError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl ClvError {
    /// Whether the failure lies in the caller's input or configuration rather
    /// than in the computation itself.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            ClvError::CorpusLine { .. }
                | ClvError::MissingField { .. }
                | ClvError::EmptyCorpus
                | ClvError::Config { .. }
                | ClvError::Misaligned { .. }
                | ClvError::Nli(crate::evaluation::nli::NliError::Config(_))
        )
    }

    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        ClvError::DimensionMismatch {
            context,
            expected,
            actual,
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(ClvError::dim(context, expected, actual))
    }
}
