use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {op} got {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("input `{0}` has no binding")]
    MissingBinding(String),
    #[error("invalid graph state: {0}")]
    State(&'static str),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenRange { id: usize, size: usize },
    #[error("{0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
