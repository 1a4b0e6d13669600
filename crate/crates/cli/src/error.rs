use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, config or data.
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] tsbayes::Error),
}

impl CliError {
    /// 3 for sampler failures, 2 for everything the user can fix.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(tsbayes::Error::Init { .. }) => 3,
            _ => 2,
        }
    }
}
