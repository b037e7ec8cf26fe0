//! Error type shared across the toolkit.

use thiserror::Error;

/// Errors produced by corpus ingestion, tokenization, the numeric core,
/// training, and evaluation.
///
/// `Parse`, `Io`, and `Invalid` describe bad inputs or misuse; `Numeric`
/// marks an internal fault (non-finite values, degenerate matrices).
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{0}")]
    Parse(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("{0}")]
    Numeric(String),
}

impl CoreError {
    pub fn parse(msg: impl Into<String>) -> Self {
        CoreError::Parse(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        CoreError::Invalid(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        CoreError::Numeric(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input or misuse rather than an
    /// internal fault.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, CoreError::Numeric(_))
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
