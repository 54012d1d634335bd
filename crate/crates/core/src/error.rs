use thiserror::Error;

pub type Result<T, E = GdrError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GdrError {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("insufficient samples: need {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("corpus has no ground-truth oracle")]
    NoOracle,
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("format error at byte {offset}: {msg}")]
    FormatError { offset: u64, msg: String },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid step: {0}")]
    InvalidStep(String),
    #[error("degenerate key for item {0}")]
    DegenerateKey(String),
    #[error("index build error: {0}")]
    BuildError(String),
    #[error("evaluation error: {0}")]
    EvalError(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GdrError {
    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        GdrError::FormatError {
            offset,
            msg: msg.into(),
        }
    }
}
