//! Crate-wide error type.

use std::fmt;
use std::io;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    ShapeMismatch { op: &'static str, detail: String },
    /// A precondition on an argument was violated.
    InvalidArgument(String),
    /// A value that must be finite was NaN or infinite.
    NonFinite(String),
    /// Binary or JSON input could not be decoded; carries the byte offset
    /// or field path where decoding stopped.
    Parse(String),
    /// Config validation failures; every violation is listed, not just the first.
    Config(Vec<String>),
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
            Error::Config(errs) => {
                write!(f, "config errors:")?;
                for e in errs {
                    write!(f, "\n  - {e}")?;
                }
                Ok(())
            }
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }
}
