use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, configuration, or missing inputs.
    #[error("{0}")]
    Usage(String),
    /// Failures while running; invalid configuration values still exit
    /// with the usage code.
    #[error(transparent)]
    Runtime(#[from] interformer::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Runtime(interformer::Error::Config(_)) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}
