use thiserror::Error;

use crate::codec::FrameError;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A primitive or module received inputs whose shapes do not fit its shape rule.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("message frame: {0}")]
    Frame(#[from] FrameError),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// A joint distribution (or other input) does not have the structure an
    /// operation requires, e.g. a dependence that must be absent.
    #[error("structural precondition violated: {0}")]
    Structural(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
