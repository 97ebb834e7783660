use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("CFL condition violated: {0}")]
    Cfl(String),

    #[error("non-finite state at t = {time}: {what}")]
    NonFinite { time: f64, what: String },

    #[error("negative mass blow-up at t = {time}: minimum density {min}")]
    NegativeMass { time: f64, min: f64 },

    #[error("record mismatch: {0}")]
    Record(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("snapshot format error in {path}: {msg}")]
    Snapshot { path: PathBuf, msg: String },

    #[error("memory budget of {budget} bytes cannot hold a checkpointed record ({need} bytes needed)")]
    Budget { budget: u64, need: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
