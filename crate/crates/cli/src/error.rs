/// Failures of a command, split by exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad invocation; exit status 2.
    #[error("{0}")]
    Usage(String),
    /// Failure while doing the work; exit status 1.
    #[error(transparent)]
    Run(#[from] nodule_cascade::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
