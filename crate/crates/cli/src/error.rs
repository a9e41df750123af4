use std::fmt;
use std::process::ExitCode;

/// Failure classes mapped onto process exit codes: configuration and usage
/// problems exit 2, everything that goes wrong after a valid launch
/// (failed checks, integration errors, I/O on outputs) exits 1.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, malformed or inconsistent configuration, missing inputs.
    Config(String),
    /// A verification check failed.
    Check(String),
    /// Runtime failure: simulation error or output I/O.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            CliError::Check(_) | CliError::Runtime(_) => ExitCode::from(1),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Check(m) => write!(f, "check failure: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<wsim_core::Error> for CliError {
    fn from(e: wsim_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
