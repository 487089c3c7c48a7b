use thiserror::Error;

/// Pipeline failures, grouped by process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or configuration.
    #[error("{0}")]
    Usage(String),

    /// Missing, malformed or inconsistent data files.
    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] orl_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Core(orl_core::Error::NonFinite(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
