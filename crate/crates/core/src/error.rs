use thiserror::Error;

pub type Result<T, E = AifError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AifError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("stale event: seq {got} is not greater than last applied seq {last}")]
    Ordering { got: u64, last: u64 },

    #[error("item {0} missing from index table")]
    Miss(u64),

    #[error("snapshot mismatch: {0}")]
    Consistency(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("decode error at byte {offset}: {reason}")]
    Decode { offset: usize, reason: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AifError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        AifError::Shape {
            op,
            detail: detail.into(),
        }
    }
}
