//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by geometry, data generation, model evaluation, training
/// and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The PDE integrator blew up or produced non-finite values.
    #[error("integration failure at t = {t}: {reason}")]
    IntegrationFailure { t: f64, reason: String },

    /// A forward/backward pass produced non-finite values.
    #[error("numeric failure: {0}")]
    NumericFailure(String),

    /// A dataset or checkpoint file is missing a required field or has a
    /// field of the wrong type/shape. Carries the field name.
    #[error("schema violation: field `{0}`: {1}")]
    SchemaViolation(String, String),

    /// A metric is undefined for the given input (e.g. zero-norm truth frame).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("training aborted: {0}")]
    TrainingFailure(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn schema(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::SchemaViolation(field.into(), msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
