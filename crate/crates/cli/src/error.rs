use mor_core::MorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(String),

    #[error("{0}")]
    Divergence(String),

    #[error("{0}")]
    Core(MorError),
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Io(_) => 4,
            CliError::Core(MorError::Checkpoint(_) | MorError::Dataset(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl From<MorError> for CliError {
    fn from(e: MorError) -> Self {
        match e {
            MorError::Divergence { .. } => CliError::Divergence(e.to_string()),
            other => CliError::Core(other),
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}
