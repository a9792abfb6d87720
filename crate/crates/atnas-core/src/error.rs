use thiserror::Error;

/// Errors surfaced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value in {op} at step {step}")]
    NonFinite { op: &'static str, step: usize },

    #[error("invalid architecture code: {0}")]
    InvalidCode(String),

    #[error("backward called without a matching forward: {0}")]
    BackwardWithoutForward(&'static str),

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate training set: {0}")]
    DegenerateInput(String),

    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("worker failure: {0}")]
    WorkerFailure(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
