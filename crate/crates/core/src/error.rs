use thiserror::Error;

#[derive(Debug, Error)]
pub enum SgadError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("structural error: {0}")]
    Structural(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("ingestion error at byte offset {offset}: {reason}")]
    Ingestion { offset: u64, reason: String },
    #[error("refusing to prune block {block}: sample {sample} of the reference set executes it")]
    LiveBlock { block: usize, sample: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SgadError>;
