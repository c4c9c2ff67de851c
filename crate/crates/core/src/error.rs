use std::io;

use thiserror::Error;

/// Errors produced anywhere in the factorization pipeline.
#[derive(Debug, Error)]
pub enum FfnError {
    /// Shapes do not line up, or a size computation overflowed.
    #[error("size error: {0}")]
    Size(String),

    /// A value is outside the domain an operation accepts.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid options, flags or policy strings.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input files.
    #[error("data error: {0}")]
    Data(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl FfnError {
    pub(crate) fn size(msg: impl Into<String>) -> Self {
        FfnError::Size(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        FfnError::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        FfnError::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        FfnError::Data(msg.into())
    }

    /// Whether the error came from numerics rather than inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, FfnError::Divergence { .. })
    }
}

pub type Result<T> = std::result::Result<T, FfnError>;
