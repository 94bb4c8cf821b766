use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("length error in {path}: expected {expected} bytes of payload, found {found}")]
    Length {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid argument `{arg}`: {reason}")]
    Argument { arg: &'static str, reason: String },

    #[error("state error: {0}")]
    State(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("placement failed for {0}")]
    Placement(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn arg(arg: &'static str, reason: impl Into<String>) -> Self {
        Error::Argument {
            arg,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
