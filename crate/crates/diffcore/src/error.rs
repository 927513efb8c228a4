use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    /// Operand shapes violate an op's contract.
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("empty group: {0}")]
    EmptyGroup(String),
    #[error("backward called on a non-scalar node with shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("backward already ran on this graph")]
    BackwardTwice,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DiffError> = std::result::Result<T, E>;
