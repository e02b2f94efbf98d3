use thiserror::Error;

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("softmax row {row} has no finite entry")]
    DegenerateRow { row: usize },

    #[error("node {0} is not a differentiable leaf of this graph")]
    UnknownLeaf(usize),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("expected dtype {expected}, found {found}")]
    DtypeMismatch { expected: String, found: String },

    #[error("tensor format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NumericsError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        NumericsError::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
