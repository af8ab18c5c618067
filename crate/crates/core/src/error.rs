use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error("particle set is empty")]
    Empty,
    #[error("non-finite coordinate in row {row}")]
    NonFinite { row: usize },
    #[error("row count mismatch: expected {expected}, got {actual}")]
    RowMismatch { expected: usize, actual: usize },
    #[error("invalid grid parameter: {0}")]
    InvalidGrid(String),
}
