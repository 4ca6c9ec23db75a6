//! CLI error type carrying the process exit code.

use std::fmt;

/// Failure category; `code` is the process exit status.
#[derive(Debug)]
pub enum CliError {
    /// Unreadable files, malformed CSV or config, bad flag values (exit 2).
    Input(String),
    /// Estimation failures surfaced by the library (exit 3).
    Numerical(String),
    /// An oracle suite in `validate` found a violation (exit 4).
    Validation(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Validation(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Input(_) => "input",
            CliError::Numerical(_) => "numerical",
            CliError::Validation(_) => "validation",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Numerical(m) | CliError::Validation(m) => m,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.kind(), self.message())
    }
}

impl From<mner::Error> for CliError {
    fn from(e: mner::Error) -> Self {
        match e {
            // Config and shape violations originate in user-supplied values.
            mner::Error::InvalidConfig(_) | mner::Error::Shape(_) => CliError::Input(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}
