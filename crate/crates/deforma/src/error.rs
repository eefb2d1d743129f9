use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error in row '{row}': {reason}")]
    Parse { row: String, reason: String },

    #[error("validation error for series '{id}': {reason}")]
    Validation { id: String, reason: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("degenerate metric for series '{id}': {reason}")]
    Degenerate { id: String, reason: String },

    #[error("load error for learner '{learner}': {reason}")]
    Load { learner: String, reason: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training diverged at epoch {epoch}, batch {batch} (lr {lr}): {reason}")]
    Diverged {
        epoch: usize,
        batch: usize,
        lr: f64,
        reason: String,
    },
}

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn validation(id: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            id: id.into(),
            reason: reason.into(),
        }
    }
}
