use std::fmt;

/// Failure classes of the runner, each mapped to a process exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    /// Unreadable file or failed write.
    Io(String),
    /// Malformed or inconsistent scenario.
    Config(String),
    /// The sharding plan could not be built or executed.
    Plan(String),
    /// Simulation disagreed with the oracle or the closed-form model.
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Plan(_) => 3,
            CliError::Mismatch(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Plan(m) => write!(f, "plan error: {m}"),
            CliError::Mismatch(m) => write!(f, "mismatch: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<lowrank_tp::Error> for CliError {
    fn from(e: lowrank_tp::Error) -> Self {
        CliError::Plan(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
