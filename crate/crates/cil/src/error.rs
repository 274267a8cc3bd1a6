//! Crate-wide error type. Tensor shape violations panic instead; `Error` is
//! reserved for conditions external input can trigger.

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Filesystem trouble: missing files, permissions, short reads.
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed content in a data file, reported with its line.
    #[error("{path}:{line}: {msg}")]
    Data { path: String, line: usize, msg: String },

    /// A configuration or schema constraint was violated.
    #[error("{0}")]
    Config(String),

    /// Training produced a non-finite value.
    #[error("{0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Error {
        Error::Io { path: path.display().to_string(), source }
    }

    pub fn data(path: &Path, line: usize, msg: impl Into<String>) -> Error {
        Error::Data { path: path.display().to_string(), line, msg: msg.into() }
    }

    pub fn config(msg: impl Into<String>) -> Error {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Error {
        Error::Numeric(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
