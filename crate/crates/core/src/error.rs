use alloc::string::String;

use crate::models::ValidationReport;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model: {0}")]
    InvalidModel(ValidationReport),

    /// A numerical scheme broke down; `step` is the grid index (or path index
    /// for Monte-Carlo drivers) where it happened.
    #[error("numerical failure at index {step}: {reason}")]
    NumericalFailure { step: usize, reason: String },

    #[error("did not converge: {0}")]
    NotConverged(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numerical(step: usize, reason: impl Into<String>) -> Self {
        Error::NumericalFailure {
            step,
            reason: reason.into(),
        }
    }
}
