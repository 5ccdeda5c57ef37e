use thiserror::Error;

/// Errors produced by the attention-steering library.
#[derive(Debug, Error)]
pub enum MhsaError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("attention trace has no steps")]
    EmptyTrace,

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("forward cache does not belong to this network (or the network changed since)")]
    CacheMismatch,

    #[error("invalid label {0}")]
    Label(i64),

    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),

    #[error("sample {0} has no question id")]
    MissingQuestionId(u64),

    #[error("operation not available in {0} mode")]
    Mode(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot compare {before} metrics with {after} metrics")]
    MetricKind { before: String, after: String },

    #[error("non-finite loss at step {step}")]
    NumericalDivergence { step: usize },

    #[error("corrected attention passed where raw attention is required")]
    CorrectedInput,

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MhsaError>;

impl MhsaError {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        MhsaError::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
