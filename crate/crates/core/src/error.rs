use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("space error at line {line}: {msg}")]
    Space { line: usize, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("rewrite error: {0}")]
    Rewrite(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("state error: {0}")]
    State(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Errors caused by user input rather than by a failed computation.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Space { .. } | Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
