use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AraError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AraError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("malformed model file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AraError {
    pub fn dim(msg: impl Into<String>) -> Self {
        AraError::Dimension(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        AraError::Input(msg.into())
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        AraError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AraError::Io {
            path: path.into(),
            source,
        }
    }
}
