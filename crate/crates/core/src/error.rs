use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MinoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MinoError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("cholesky factorization failed at jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },

    #[error("backward called without a recorded forward pass")]
    NoForward,

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("adaptive step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },

    #[error("I/O error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl MinoError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MinoError::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        MinoError::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MinoError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        MinoError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
