//! Crate-wide error type and the process exit-code convention.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid usage or configuration (exit code 2).
    #[error("config error: {0}")]
    Config(String),

    /// Unreadable, malformed, or missing data files (exit code 3).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed or incompatible checkpoint (exit code 3).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Tensor shape contract violated inside an operation (exit code 4).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Non-finite values or a failed numerical check (exit code 4).
    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Exit codes: 0 success, 2 usage/config, 3 data/checkpoint, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Checkpoint(_) | Error::Io(_) | Error::Image(_) => 3,
            Error::Shape(_) | Error::Numeric(_) => 4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_convention() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Data("x".into()).exit_code(), 3);
        assert_eq!(Error::Checkpoint("x".into()).exit_code(), 3);
        assert_eq!(Error::Shape("x".into()).exit_code(), 4);
        assert_eq!(Error::Numeric("x".into()).exit_code(), 4);
    }
}
