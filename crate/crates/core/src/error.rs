use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the captioning stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenRange { id: usize, size: usize },

    #[error("empty caption: {0:?}")]
    EmptyCaption(String),

    #[error("clip {clip_id}: {reason}")]
    Clip { clip_id: String, reason: String },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn clip(clip_id: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Clip {
            clip_id: clip_id.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-parseable category, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Domain(_) => "domain",
            Error::Degenerate(_) => "degenerate",
            Error::Contract(_) => "contract",
            Error::NonFinite(_) | Error::Diverged(_) => "numeric",
            Error::TokenRange { .. } | Error::EmptyCaption(_) => "text",
            Error::Clip { .. } | Error::Format { .. } | Error::Json(_) => "data",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
