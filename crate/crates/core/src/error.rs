//! Error types shared across the toolkit.

use thiserror::Error;

/// Unified error type for every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is inconsistent or out of range.
    #[error("configuration error: {0}")]
    Config(String),

    /// Runtime input (batch shapes, label ranges, undecodable images).
    #[error("input error: {0}")]
    Input(String),

    /// A required artifact (weights file, checkpoint) is missing or unusable.
    #[error("resource error: {0}")]
    Resource(String),

    /// Dataset ingestion failed (empty root, no classes left).
    #[error("ingestion error: {0}")]
    Ingest(String),

    /// A numeric argument violates its domain (e.g. temperature <= 0).
    #[error("domain error: {0}")]
    Domain(String),

    /// Training aborted (non-finite loss, optimizer failure).
    #[error("training error: {0}")]
    Training(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn resource(msg: impl Into<String>) -> Self {
        Error::Resource(msg.into())
    }
}
