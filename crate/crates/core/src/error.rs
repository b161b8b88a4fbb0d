use std::io;

use thiserror::Error;

/// Errors raised anywhere in the search pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: {left:?} vs {right:?}")]
    Dimension {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("index {index} out of range for {bound} ({context})")]
    Index {
        context: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{0} out of range")]
    Range(String),
    #[error("batch of {got} rows is too small; at least {need} required")]
    InsufficientBatch { got: usize, need: usize },
    #[error("infeasible sampling: {positive} positive probabilities but k = {k}")]
    Infeasible { positive: usize, k: usize },
    #[error("invalid state: {0}")]
    State(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("corrupted checkpoint: {0}")]
    Corruption(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dims(context: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            context,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
