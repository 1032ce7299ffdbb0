use std::io;

use thiserror::Error;

use crate::trainer::checkpoint::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// `mean(vᵀv)` vanished, so no step can be computed at this time.
    #[error("degenerate model at t = {t}: tangent has zero mean squared norm")]
    DegenerateModel { t: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training halted at step {step} after {aborts} consecutive non-finite steps")]
    TrainingHalted { step: u64, aborts: u32 },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
