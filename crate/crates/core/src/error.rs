use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MagicError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("non-finite value in {term} at step {step}")]
    NonFinite { term: &'static str, step: u64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("empty report: confusion matrix has no counts")]
    EmptyReport,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MagicError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        MagicError::Argument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        MagicError::Config(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        MagicError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MagicError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, MagicError>;
