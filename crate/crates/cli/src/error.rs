use thiserror::Error;

/// Failure of a subcommand, split by exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad config, missing or malformed input. Exit status 2.
    #[error("{0}")]
    Input(String),
    /// The computation itself failed. Exit status 3.
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }
}

impl From<gpcdl::Error> for CliError {
    fn from(e: gpcdl::Error) -> Self {
        match e {
            gpcdl::Error::Numerical(_) | gpcdl::Error::DegenerateDictionary => CliError::Numerical(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
