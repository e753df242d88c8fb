//! Crate-wide error type.
//!
//! Errors are grouped by what the caller can do about them: `Config` and
//! `Data` mean the inputs were bad (fix the flags / files and rerun), the
//! rest mean something failed at runtime. The CLI maps that split onto its
//! exit codes.

use std::fmt;
use std::io;
use std::path::PathBuf;

#[derive(Debug)]
pub enum Error {
    /// Tensor shape/dimension mismatch. Message names both shapes.
    Shape(String),
    /// Invalid configuration. All problems for one config are collected
    /// into a single message.
    Config(String),
    /// Malformed dataset input (manifest line, label vector, image file).
    Data(String),
    /// Filesystem failure with the path that triggered it.
    Io { path: PathBuf, source: io::Error },
    /// Malformed or mismatched checkpoint.
    Checkpoint(String),
    /// Numeric failure (non-finite loss, etc.).
    Numeric(String),
}

/// Failure class used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Caller gave bad input: exit code 1.
    Validation,
    /// Something broke while running: exit code 2.
    Runtime,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Data(_) => ErrorClass::Validation,
            Error::Shape(_) | Error::Io { .. } | Error::Checkpoint(_) | Error::Numeric(_) => {
                ErrorClass::Runtime
            }
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "invalid config: {m}"),
            Error::Data(m) => write!(f, "bad data: {m}"),
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            Error::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
