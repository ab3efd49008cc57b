use thiserror::Error;

/// Rejected input to one of the image-math components.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HazeError {
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}
