use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent dimensions or invalid hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed binary data; `offset` is the byte position where decoding failed.
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Structurally well-formed data that violates a bundle invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Malformed line in a line-delimited text file (1-based line number).
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Input outside a function's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A feature collapsed to the zero vector (e.g. after masking).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Format { .. } | Error::Validation(_) | Error::Parse { .. } | Error::Io { .. } => 3,
            Error::Domain(_) | Error::Degenerate(_) => 4,
        }
    }
}
