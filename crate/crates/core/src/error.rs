use thiserror::Error;

use crate::data::ContainerError;

pub type Result<T> = std::result::Result<T, IfrError>;

#[derive(Debug, Error)]
pub enum IfrError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error(transparent)]
    Container(#[from] ContainerError),
}

impl IfrError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        IfrError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        IfrError::Config(detail.into())
    }
}
