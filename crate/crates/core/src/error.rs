use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("sample index {index} out of range for a dataset of {n} samples")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid privacy budget: {0}")]
    InvalidBudget(String),

    #[error("non-finite loss at iteration {iteration} (sample {sample})")]
    NonFiniteLoss { iteration: usize, sample: usize },

    #[error("trace is empty")]
    EmptyTrace,

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("schema violation at line {line}: {message}")]
    Schema { line: u64, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: refusing to overwrite existing file")]
    WouldOverwrite { path: PathBuf },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_usage_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument { .. }
                | Error::InvalidBudget(_)
                | Error::InvalidProblem(_)
                | Error::InvalidConfig(_)
                | Error::Schema { .. }
                | Error::Json(_)
                | Error::DimensionMismatch { .. }
        )
    }
}
