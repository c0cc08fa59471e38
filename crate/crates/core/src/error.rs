use thiserror::Error;

pub type Result<T, E = SparcError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SparcError {
    /// Tensor shapes do not line up for an operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("validation error: {0}")]
    Validation(String),

    /// An operation was attempted in a lifecycle state that forbids it
    /// (training a frozen task, consolidating after task 1, ...).
    #[error("state error: {0}")]
    State(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SparcError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        SparcError::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
