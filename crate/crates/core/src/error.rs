use thiserror::Error;

pub type Result<T, E = CsaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CsaError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("{0}: weight matrix is not symmetric")]
    Asymmetric(&'static str),

    #[error("{0}: degenerate input (zero variance)")]
    Degenerate(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr = {lr})")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },

    #[error("non-finite function value at probe coordinate {index}")]
    NonFiniteProbe { index: usize },

    #[error("malformed {what}: {reason}")]
    Format { what: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CsaError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        CsaError::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn format(what: impl Into<String>, reason: impl Into<String>) -> Self {
        CsaError::Format {
            what: what.into(),
            reason: reason.into(),
        }
    }
}
