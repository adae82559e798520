//! Exit statuses: 0 success, 1 numerical failure, 2 usage, 3 input or output.

use std::fmt;

pub const EXIT_NUMERICAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: EXIT_USAGE, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError { code: EXIT_IO, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<smoothps::Error> for CliError {
    fn from(e: smoothps::Error) -> Self {
        use smoothps::Error as E;
        let code = if e.is_numerical() {
            EXIT_NUMERICAL
        } else if matches!(e, E::BadColumn(_) | E::InvalidArgument(_)) {
            EXIT_USAGE
        } else {
            EXIT_IO
        };
        CliError { code, message: e.to_string() }
    }
}
