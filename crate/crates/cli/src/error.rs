use std::io;
use std::path::Path;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing input {path}")]
    Missing { path: String },

    #[error(transparent)]
    Core(#[from] amd_core::Error),

    #[error("{0}")]
    Format(String),
}

impl CliError {
    pub fn read(path: &Path, e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::NotFound {
            CliError::Missing {
                path: path.display().to_string(),
            }
        } else {
            CliError::Core(e.into())
        }
    }

    /// Process exit status; see the table in the binary's help text.
    pub fn exit_code(&self) -> u8 {
        use amd_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config(_)) => 2,
            CliError::Missing { .. } => 3,
            CliError::Core(E::Io(e)) if e.kind() == io::ErrorKind::NotFound => 3,
            CliError::Format(_) | CliError::Core(E::Format { .. }) => 4,
            CliError::Core(E::Invalid(_)) => 5,
            CliError::Core(E::Divergence { .. }) => 6,
            CliError::Core(E::Io(_)) => 7,
        }
    }
}
