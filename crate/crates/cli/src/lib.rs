//! Experiment harness for `milda`: the comparison methods and ablations,
//! seeded run matrices, metric tables and plots.

pub mod config;
pub mod data;
pub mod methods;
pub mod plots;
pub mod report;
pub mod suite;

use thiserror::Error;

use crate::methods::MethodName;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{method} (seed {seed}): {source}")]
    Method {
        method: MethodName,
        seed: u64,
        source: milda::Error,
    },

    #[error(transparent)]
    Core(#[from] milda::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            _ => 1,
        }
    }
}
