use sidlab_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                Error::InvalidArgument(_) => 2,
                Error::MissingPrerequisite(_) => 3,
                Error::Io { .. } | Error::Format { .. } => 4,
                Error::BudgetExhausted { .. } => 5,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
