use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("capacity exceeded: {len} tokens > maximum {max}")]
    Capacity { len: usize, max: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("gradient oracle error: {0}")]
    Oracle(String),
    #[error("non-finite loss at iteration {iteration} (batch seeds {seeds:?})")]
    NonFinite { iteration: usize, seeds: Vec<u64> },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
