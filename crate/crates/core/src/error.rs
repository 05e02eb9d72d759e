use safer_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SaferError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("empty sequence: {0}")]
    EmptySequence(String),
    #[error("empty training set: {0}")]
    EmptyTraining(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate training data: {0}")]
    DegenerateTraining(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("linear algebra error: {0}")]
    LinearAlgebra(String),
    #[error("bound violation: {0}")]
    Bound(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SaferError>;
