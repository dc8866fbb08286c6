use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, EdlError>;

#[derive(Debug, Error)]
pub enum EdlError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("negative evidence {value} at class {class}, voxel ({row}, {col})")]
    NegativeEvidence {
        value: f64,
        class: usize,
        row: usize,
        col: usize,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("argument outside the function domain: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl EdlError {
    /// True for errors that indicate a broken numerical contract (e.g. negative
    /// evidence reaching the Dirichlet mapping) rather than bad user input.
    pub fn is_contract_violation(&self) -> bool {
        matches!(
            self,
            EdlError::NegativeEvidence { .. } | EdlError::NonFinite(_) | EdlError::Domain(_)
        )
    }
}
