use thiserror::Error;

/// Errors surfaced by the library. The CLI maps these onto exit codes
/// (data 1, config/usage 2, non-finite loss 3).
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input data (corpus files, label sets).
    #[error("data error: {0}")]
    Data(String),

    /// Invalid configuration values.
    #[error("config error: {0}")]
    Config(String),

    /// A model API precondition was violated (shape mismatch, unknown
    /// token id, missing bos, all positions masked, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Checkpoint directory missing, corrupt, or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted because the loss left the finite range.
    #[error("non-finite loss in stage '{stage}', epoch {epoch}, step {step}, batch [{}]", batch_ids.join(", "))]
    NonFiniteLoss {
        stage: String,
        epoch: usize,
        step: usize,
        batch_ids: Vec<String>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }
}
