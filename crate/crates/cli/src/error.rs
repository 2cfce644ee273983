use thiserror::Error;

/// CLI failures, each mapped to a process exit code.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CliError {
    /// Bad configuration or usage.
    #[error("configuration error: {0}")]
    Config(String),

    /// Unreadable or malformed input, or unwritable output.
    #[error("{0}")]
    Io(String),

    /// The run completed but an invariant check failed.
    #[error("audit failed: {0}")]
    Audit(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Audit(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<budgetguard::Error> for CliError {
    fn from(e: budgetguard::Error) -> Self {
        use budgetguard::Error as E;
        match e {
            E::InvalidConfig(_) | E::InvalidParams(_) | E::InvalidRequest(_) | E::SiteNotRegistered(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
