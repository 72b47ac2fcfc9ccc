//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, AgaError>;

#[derive(Debug, Error)]
pub enum AgaError {
    #[error("{op}: dimension mismatch, {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid {what}: {why}")]
    InvalidParameter { what: String, why: String },

    #[error("class index {index} out of range for {n_classes} classes")]
    IndexOutOfRange { index: usize, n_classes: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("attention requires at least one key/value row")]
    EmptyHistory,

    #[error("ground-truth guidance requires a supervision guide, none provided")]
    GuidanceMissing,

    #[error("empty input sequence")]
    EmptyInput,

    #[error("no supervised timesteps contribute to the loss")]
    NoSupervision,

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("gating is disabled in this model configuration")]
    GatingDisabled,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AgaError {
    pub fn invalid(what: impl Into<String>, why: impl Into<String>) -> Self {
        AgaError::InvalidParameter {
            what: what.into(),
            why: why.into(),
        }
    }

    pub fn shape(op: impl Into<String>, lhs: &[usize], rhs: &[usize]) -> Self {
        AgaError::ShapeMismatch {
            op: op.into(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
