use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bag {bag_id}: {reason}")]
    InvalidBag { bag_id: u64, reason: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("instance pool exhausted after building {built} bags")]
    PoolExhausted { built: usize },

    #[error("metric undefined: {0}")]
    Undefined(&'static str),

    #[error("training diverged in {phase} at epoch {epoch}")]
    Diverged { phase: &'static str, epoch: usize },

    #[error("container format: {0}")]
    Format(String),

    #[error("checkpoint architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
