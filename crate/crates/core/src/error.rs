use thiserror::Error;

/// Errors raised by the tensor, precision, gradient and analysis layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("mode index {mode} out of range for an order-{order} tensor")]
    ModeIndex { mode: usize, order: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for mode {mode} of size {size}")]
    Index { mode: usize, index: usize, size: usize },

    #[error("sample size {size} invalid for mode {mode} of size {dim}")]
    SampleSize { mode: usize, size: usize, dim: usize },

    #[error("tensor has zero Frobenius norm")]
    ZeroNorm,

    #[error("non-finite input value {0}")]
    NonFinite(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
