use thiserror::Error;

#[derive(Debug, Error)]
pub enum FinError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive definite in {context}")]
    NotPositiveDefinite { context: &'static str },

    #[error("non-finite value at iteration {iteration} in block `{block}`")]
    NonFinite { iteration: usize, block: &'static str },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("state invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, FinError>;

pub(crate) fn invalid(msg: impl Into<String>) -> FinError {
    FinError::InvalidArgument(msg.into())
}
