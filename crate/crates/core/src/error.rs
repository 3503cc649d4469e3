//! Error type shared across the crate.

use std::fmt;

/// Errors raised by tensor algebra, network construction, training and IO.
#[derive(Debug)]
pub enum Error {
    /// Shape or dimension mismatch; the message names the offending shapes.
    Shape(String),
    /// Invalid or infeasible configuration.
    Config(String),
    /// Malformed dataset or container contents.
    Data(String),
    /// A loss or gradient stopped being finite; the message names the tensor.
    NonFinite(String),
    /// Underlying filesystem error.
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
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
