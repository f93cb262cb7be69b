use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] avsep_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config fingerprint {found} does not match the coarse checkpoint ({expected})")]
    FingerprintMismatch { expected: String, found: String },
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("all {0} manifest entries failed")]
    AllEntriesFailed(usize),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

pub fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(PipelineError::Usage(msg.into()))
}
