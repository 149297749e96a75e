use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Caller-supplied input or configuration is invalid.
    #[error("validation error: {0}")]
    Validation(String),

    /// An API precondition was violated (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A metric is undefined for the given labels (e.g. a single class).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("frozen parameter `{0}` cannot be updated")]
    FrozenParameter(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Wraps an I/O failure with the path it concerns.
    pub fn io_at(path: &std::path::Path, e: std::io::Error) -> Self {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence(_) => 3,
            Error::Io(_) | Error::Format { .. } => 4,
            _ => 2,
        }
    }
}
