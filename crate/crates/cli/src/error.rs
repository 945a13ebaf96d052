use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] capgan::Error),

    #[error("{0}")]
    Usage(String),

    #[error("missing {which} checkpoint at {}", path.display())]
    MissingCheckpoint { which: &'static str, path: PathBuf },

    #[error("config file {}: {reason}", path.display())]
    Config { path: PathBuf, reason: String },

    #[error("{0}")]
    Data(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Usage(_) => "usage",
            CliError::MissingCheckpoint { .. } => "checkpoint",
            CliError::Config { .. } => "config",
            CliError::Data(_) => "data",
            CliError::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
