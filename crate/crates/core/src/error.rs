use thiserror::Error;

use crate::network::EdgeId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("scenario support has {size} joint scenarios, above the cap of {cap}; use sampling")]
    SupportTooLarge { size: u128, cap: usize },

    #[error("best-response dynamics did not converge within {rounds} rounds")]
    NonConvergence { rounds: usize },

    #[error("every delay profile on edge {edge} is contradicted by the observed travel times")]
    EmptyPosterior { edge: EdgeId },

    #[error("simulation did not finish within {steps} steps")]
    SimulationTimeout { steps: u32 },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the file system rather than of the input.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io(_) => true,
            Error::Csv(e) => e.is_io_error(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
