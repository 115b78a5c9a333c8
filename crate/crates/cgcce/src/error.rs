//! Error and result types shared across the crate.

use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Configuration validation failure; message names the offending field.
    Config(String),
    /// Tensor/feature-map dimension mismatch.
    Shape(String),
    /// Dataset, manifest, or image file problem.
    Data(String),
    /// Underlying I/O failure.
    Io(String),
    /// Training-time failure (divergence, bad schedule, missing split).
    Train(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
            Error::Train(m) => write!(f, "train error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Prefix an error with the pyramid scale it occurred at.
    pub fn at_scale(self, scale: usize) -> Error {
        match self {
            Error::Config(m) => Error::Config(format!("scale {scale}: {m}")),
            Error::Shape(m) => Error::Shape(format!("scale {scale}: {m}")),
            Error::Data(m) => Error::Data(format!("scale {scale}: {m}")),
            Error::Io(m) => Error::Io(format!("scale {scale}: {m}")),
            Error::Train(m) => Error::Train(format!("scale {scale}: {m}")),
        }
    }
}
