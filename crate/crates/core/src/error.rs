//! Crate-wide error type. Contract violations and I/O failures are kept
//! apart so the CLI can map them to distinct exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A documented precondition or invariant was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at record {index}: {message}")]
    Parse { index: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (batch {batch})")]
    NonFiniteLoss { step: usize, batch: usize },

    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Image(_) => 2,
            _ => 1,
        }
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
