use std::fmt;
use std::process::ExitCode;

/// CLI failure classes with their exit codes: usage and parse problems exit
/// with 2, invariant violations with 3, environment/IO failures with 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Parse(String),
    Invariant(String),
    Runtime(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) | CliError::Parse(_) => ExitCode::from(2),
            CliError::Invariant(_) => ExitCode::from(3),
            CliError::Runtime(_) | CliError::Io(_) => ExitCode::from(1),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Parse(msg) => write!(f, "config error: {msg}"),
            CliError::Invariant(msg) => write!(f, "invalid experiment: {msg}"),
            CliError::Runtime(msg) => write!(f, "run failed: {msg}"),
            CliError::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
