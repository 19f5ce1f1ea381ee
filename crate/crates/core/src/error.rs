use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied parameter violates its documented domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A numeric routine could not produce a finite or well-defined result.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed binary input; `offset` is the byte position where parsing stopped.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    /// Configuration rejected during validation.
    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// Something expected on disk is missing.
    #[error("missing file(s) under {dir}: {}", .files.join(", "))]
    Missing { dir: PathBuf, files: Vec<String> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
