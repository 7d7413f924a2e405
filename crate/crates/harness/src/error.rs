use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad flags, config, or file arguments. Maps to exit code 2.
    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] hmr_core::Error),

    /// Training hit a non-finite loss; the last finite weights were kept.
    #[error("non-finite loss at epoch {epoch}, step {step}; last good checkpoint is from epoch {last_good_epoch}")]
    Diverged { epoch: usize, step: usize, last_good_epoch: usize },

    /// One or more verification suites failed.
    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
