use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what} not found at {}; run `embgeo {producer}` with the same --config and --out first", path.display())]
    Missing {
        what: &'static str,
        path: PathBuf,
        producer: &'static str,
    },

    #[error("malformed {}: {detail}", path.display())]
    Malformed { path: PathBuf, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Core(#[from] embgeo_core::Error),
}

impl CliError {
    /// 1 when a check or computation failed, 2 when the command could not
    /// start because of its inputs.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Verification(_) => 1,
            CliError::Core(embgeo_core::Error::Config(_) | embgeo_core::Error::Checkpoint(_)) => 2,
            CliError::Core(_) => 1,
            CliError::Config(_) | CliError::Missing { .. } | CliError::Malformed { .. } | CliError::Io { .. } => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}
