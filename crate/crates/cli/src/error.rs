use serde::Serialize;

/// Front-end failures, each mapped to an exit code.
#[derive(Debug)]
pub enum CliError {
    /// Unreadable or schema-invalid configuration.
    Config(String),
    Io(String),
    Core(mh_ldp::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_solver_failure() => 3,
            _ => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Core(e) if e.is_solver_failure() => "solver",
            CliError::Core(_) => "validation",
        }
    }

    pub fn report(&self, command: Option<&str>) -> ErrorReport {
        ErrorReport {
            error: self.kind().to_string(),
            message: self.to_string(),
            command: command.map(str::to_string),
            exit_code: self.exit_code(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "{m}"),
            CliError::Io(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<mh_ldp::Error> for CliError {
    fn from(e: mh_ldp::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Machine-readable error, printed to stderr and written as `error.json`.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub error: String,
    pub message: String,
    pub command: Option<String>,
    pub exit_code: i32,
}
