use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("zero-norm vector has no direction")]
    ZeroNorm,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value at coordinate {coordinate}")]
    NonFinite { coordinate: usize },

    #[error("truncated binary {path}: expected {expected} bytes, found {actual}")]
    TruncatedBinary {
        path: String,
        expected: usize,
        actual: usize,
    },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient candidates: need {needed}, only {available} available")]
    InsufficientCandidates { needed: usize, available: usize },

    #[error("class id {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("answers missing for item ids: {}", .0.join(","))]
    MissingAnswers(Vec<String>),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl LabError {
    /// Stable machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            LabError::DimensionMismatch { .. } => "dimension_mismatch",
            LabError::ZeroNorm => "zero_norm",
            LabError::EmptyInput(_) => "empty_input",
            LabError::NonFinite { .. } => "non_finite",
            LabError::TruncatedBinary { .. } => "truncated_binary",
            LabError::InvalidManifest(_) => "invalid_manifest",
            LabError::InvalidInput(_) => "invalid_input",
            LabError::InsufficientCandidates { .. } => "insufficient_candidates",
            LabError::LabelOutOfRange { .. } => "label_out_of_range",
            LabError::NonFiniteLoss { .. } => "non_finite_loss",
            LabError::MissingAnswers(_) => "missing_answers",
            LabError::Io(_) => "io",
            LabError::Json(_) => "json",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        LabError::InvalidInput(msg.into())
    }
}
