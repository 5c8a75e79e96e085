//! Error type shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Invalid argument or tensor shape.
    #[error("validation error: {0}")]
    Validation(String),
    /// Bad or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Filesystem / serialization problems.
    #[error("i/o error: {0}")]
    Io(String),
    /// Operation invoked on a model in the wrong state (e.g. missing head).
    #[error("state error: {0}")]
    State(String),
    /// Attack loop produced non-finite gradients or losses.
    #[error("attack error: {0}")]
    Attack(String),
    /// Training diverged (non-finite loss).
    #[error("numerical error: {0}")]
    Numerical(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
