use std::fmt;

/// Failure categories mapped to exit codes: config 3, input 2, compute 1.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Input(String),
    Compute(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Compute(_) => 1,
            CliError::Input(_) => 2,
            CliError::Config(_) => 3,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Compute(_) => "E_COMPUTE",
            CliError::Input(_) => "E_INPUT",
            CliError::Config(_) => "E_CONFIG",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Compute(m) | CliError::Input(m) | CliError::Config(m) => m,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.code(), one_line(self.message()))
    }
}

/// Collapses a possibly multi-line message into the single line the error
/// contract promises.
pub fn one_line(s: &str) -> String {
    s.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("; ")
}

pub fn config_err(e: impl fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

pub fn input_err(e: impl fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

pub fn compute_err(e: impl fmt::Display) -> CliError {
    CliError::Compute(e.to_string())
}
