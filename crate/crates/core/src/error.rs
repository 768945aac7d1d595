use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (bad index, wrong dimension, wrong code kind).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A training routine ran out of budget before reaching its quality bar.
    #[error("{what} training failed: {metric} = {achieved:.5}, required < {threshold:.5}")]
    TrainingFailure {
        what: &'static str,
        metric: &'static str,
        achieved: f64,
        threshold: f64,
    },

    /// A loss evaluated to NaN or infinity.
    #[error("non-finite loss at iteration {iteration}")]
    NonFinite { iteration: usize },

    /// A sampling pool had no usable entries.
    #[error("empty pool: {0}")]
    EmptyPool(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image codec: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
