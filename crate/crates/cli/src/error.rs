use thiserror::Error;
use vin_core::diff::DiffError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] vin_core::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for numeric divergence, 4 for I/O
    /// and malformed files.
    pub fn exit_code(&self) -> i32 {
        use vin_core::Error as E;
        match self {
            Self::Config(_) => 2,
            Self::Io { .. } => 4,
            Self::Core(e) => match e {
                E::Divergence(_) | E::Diff(DiffError::NonFinite { .. }) => 3,
                E::Io { .. } | E::Format { .. } => 4,
                _ => 2,
            },
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
