//! Error type shared across the crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the library.
#[derive(Debug)]
pub enum Error {
    /// Tensor shape mismatch; names both offending shapes.
    Shape(String),
    /// Invalid parameter value (non-positive temperature, Q too large, ...).
    Param(String),
    /// Non-finite value where a finite one is required.
    Numeric(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// Malformed file content (JSON, PPM header, ...).
    Parse(String),
    /// Dataset consistency violation (count mismatch, out-of-bounds annotation).
    Data(String),
    /// Checkpoint format or compatibility problem.
    Checkpoint(String),
    /// Degenerate statistics input.
    Stats(String),
    /// Scene generation could not satisfy the configured constraints.
    Generation(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Param(msg) => write!(f, "parameter error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Io(err) => write!(f, "i/o error: {err}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Stats(msg) => write!(f, "statistics error: {msg}"),
            Error::Generation(msg) => write!(f, "generation error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Parse(err.to_string())
    }
}
