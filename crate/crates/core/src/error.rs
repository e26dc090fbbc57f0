use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Extents that must agree do not.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Malformed argument (bad permutation, repeated axis, out-of-range value, ...).
    #[error("argument error: {0}")]
    Argument(String),

    /// Exact contraction would exceed the configured size guard.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Malformed binary input. `offset` is the byte offset where parsing failed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    /// Checkpoint version or shape mismatch.
    #[error("version error: {0}")]
    Version(String),

    #[error("config error: {0}")]
    Config(String),

    /// A loss or gradient stopped being finite.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
