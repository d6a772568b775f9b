//! Crate-wide error type shared by all simulator layers.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("key mismatch: ciphertext owned by key {ct_key}, attempted key {attempted}")]
    KeyMismatch { ct_key: u64, attempted: u64 },

    #[error("depth budget exceeded: operation would reach depth {reached} but budget is {budget}")]
    DepthExceeded { reached: u32, budget: u32 },

    #[error("kernel domain violation: {0}")]
    Domain(String),

    #[error("noise ledger: {0}")]
    Ledger(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("audit violation: {0}")]
    Audit(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
