use thiserror::Error;

/// Errors surfaced by environment construction, rollouts, and updates.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid environment shape: {0}")]
    InvalidShape(String),

    #[error("exact-mode cap exceeded: {actual} paths > {cap}")]
    CapExceeded { actual: u128, cap: u128 },

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("unknown policy key: {0}")]
    UnknownKey(String),

    #[error("misaligned inputs: {0}")]
    Misaligned(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid algorithm/estimator combination: {0}")]
    InvalidCombination(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
