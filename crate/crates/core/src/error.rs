use thiserror::Error;

use crate::diff::DiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid system: {0}")]
    InvalidSystem(String),
    #[error("energy {energy} unreachable for {system} (max {max})")]
    UnreachableEnergy {
        system: &'static str,
        energy: f64,
        max: f64,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn format(path: &std::path::Path, detail: impl Into<String>) -> Self {
        Self::Format {
            path: path.display().to_string(),
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
