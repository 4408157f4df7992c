use alloc::string::String;

use crate::tensor::Dims4;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Dims4, right: Dims4 },

    #[error("buffer of length {actual} does not match shape (expected {expected})")]
    BadLength { expected: usize, actual: usize },

    #[error("tensor dimensions must be non-zero, got {0:?}")]
    EmptyTensor(Dims4),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("input {height}x{width} is smaller than the minimum support {min}")]
    TooSmall { height: usize, width: usize, min: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss; first non-finite gradient in parameter `{0}`")]
    Diverged(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
