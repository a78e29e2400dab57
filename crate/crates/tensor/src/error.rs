use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{op}: invalid parameter: {reason}")]
    InvalidParameter { op: &'static str, reason: String },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis { op: &'static str, axis: usize, rank: usize },

    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph was already consumed by a backward pass; run a new forward pass first")]
    StaleGraph,

    #[error("gradient oracle: {0}")]
    Oracle(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
