use std::fmt::Display;

/// Failures split by who has to act: the user (bad input) or the operator
/// (a dependency or the machine misbehaved).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    /// Arguments, configuration or input files are invalid. Exit code 1.
    Validation(String),
    /// I/O, transport or model failures. Exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

pub fn invalid(e: impl Display) -> CliError {
    CliError::Validation(e.to_string())
}

pub fn runtime(e: impl Display) -> CliError {
    CliError::Runtime(e.to_string())
}

impl From<resroute_gateway::ConfigError> for CliError {
    fn from(e: resroute_gateway::ConfigError) -> Self {
        invalid(e)
    }
}
