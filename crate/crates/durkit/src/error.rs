//! Crate-wide error type.
//!
//! Errors are grouped into three categories so the CLI can map them onto
//! stable exit codes: usage (1), data (2), numeric (3).

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller passed inconsistent or out-of-contract arguments.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Configuration key/value problems (unknown key, bad value, bad layering).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input data (parse failures carry file/line context).
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// Semantic problems in otherwise well-formed data.
    #[error("data error: {0}")]
    Data(String),

    /// Integrity check failed (corpus hash, schema version).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Unknown name passed to a registry lookup.
    #[error("unknown {kind} {name:?}; available: {available}")]
    UnknownName {
        kind: &'static str,
        name: String,
        available: String,
    },

    /// Training or inference produced a non-finite value.
    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
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

    pub fn parse(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::UnknownName { .. } => 1,
            Error::Parse { .. } | Error::Data(_) | Error::Integrity(_) | Error::Io { .. } => 2,
            Error::Numeric(_) => 3,
        }
    }
}
