use std::fmt;

use rso_core::Error;

/// Process exit statuses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exit {
    Pass = 0,
    CheckFailed = 1,
    Usage = 2,
    NumericAbort = 3,
}

impl Exit {
    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { exit: Exit::Usage, message: message.into() }
    }

    pub fn check(message: impl Into<String>) -> Self {
        Self { exit: Exit::CheckFailed, message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self { exit: Exit::NumericAbort, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) | Error::NoConvergence(_) | Error::Degenerate(_) => CliError::numeric(e.to_string()),
            _ => CliError::usage(e.to_string()),
        }
    }
}
