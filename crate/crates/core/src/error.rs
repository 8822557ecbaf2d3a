use thiserror::Error;

pub type Result<T> = std::result::Result<T, AtaError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AtaError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A non-finite value was produced or consumed. `node` is the tape index when known.
    #[error("non-finite value in {op}{}", node.map(|n| format!(" (node {n})")).unwrap_or_default())]
    NonFinite { op: &'static str, node: Option<usize> },

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("problem too large: {0}")]
    TooLarge(String),

    #[error("unable to generate distinct patches: {0}")]
    GenerationFailed(String),
}

impl AtaError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        AtaError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        AtaError::InvalidArgument(detail.into())
    }
}
