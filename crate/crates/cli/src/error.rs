use std::fmt;
use std::path::Path;

/// Exit status for invalid flags, config values or missing arguments.
pub const EXIT_USAGE: u8 = 2;
/// Exit status for unreadable inputs or unwritable outputs.
pub const EXIT_IO: u8 = 3;
/// Exit status for inputs that were read but rejected.
pub const EXIT_DATA: u8 = 4;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Data(cpsets::Error),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("I/O error on {}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

impl From<cpsets::Error> for CliError {
    fn from(e: cpsets::Error) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Data(e)
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Io(msg) => f.write_str(msg),
            CliError::Data(e) => write!(f, "data error: {e}"),
        }
    }
}

/// Parameter problems found while validating settings are usage errors.
pub fn usage(e: cpsets::Error) -> CliError {
    CliError::Usage(e.to_string())
}
