use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GmnError>;

#[derive(Debug, Error)]
pub enum GmnError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("ingestion error at {}: {message}", path.display())]
    Ingest { path: PathBuf, message: String },

    #[error("dataset does not match the expected layout:\n  {}", .0.join("\n  "))]
    CountMismatch(Vec<String>),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch in {}", .0.display())]
    CheckpointChecksum(PathBuf),

    #[error("checkpoint is malformed: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint configuration differs from the requested one: {0}")]
    ConfigMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {step}; last good checkpoint: {}", last_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    NonFiniteLoss { step: u64, last_checkpoint: Option<PathBuf> },

    #[error("dataset cache missing at {}; run `gmn {command}` first", path.display())]
    MissingCache { path: PathBuf, command: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
