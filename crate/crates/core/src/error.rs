use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes or configuration values that cannot work together.
    #[error("shape/configuration error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Tokens or targets outside their vocabulary, examples too long, etc.
    #[error("data error: {0}")]
    Data(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("corrupt checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
