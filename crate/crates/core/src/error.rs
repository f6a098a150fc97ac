use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("undefined similarity: {0}")]
    UndefinedSimilarity(&'static str),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("cache integrity error for entry {key}: {reason}")]
    Integrity { key: String, reason: String },

    #[error("stale index: {0}")]
    StaleIndex(String),

    #[error("invalid input: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Decode { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Process exit code for this error: 1 usage/config, 2 data, 3 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Shape { .. } | Error::Numeric(_) | Error::UndefinedSimilarity(_) => 3,
            _ => 2,
        }
    }
}
