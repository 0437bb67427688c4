use alloc::boxed::Box;
use alloc::string::String;

use crate::losses::LossReport;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("modality mismatch: expected {expected}, got {actual}")]
    ModalityMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("index {index} out of range for {what} of size {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset validation failed: {0}")]
    Validation(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("teacher encoder has not been pretrained or loaded")]
    TeacherNotReady,

    /// A training step produced a non-finite loss; carries every term computed so far.
    #[error("non-finite loss at step {}: {}", .0.step, .0.to_line())]
    NonFiniteLoss(Box<LossReport>),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
