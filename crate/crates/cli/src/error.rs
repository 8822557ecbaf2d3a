use std::fmt;
use std::path::Path;

use ata_core::AtaError;

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliErrorKind {
    /// Bad arguments or an unusable configuration.
    Usage,
    /// Missing, unreadable, unwritable or malformed data.
    Data,
    /// A `--check` threshold was not met.
    Check,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: CliErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: CliErrorKind::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            kind: CliErrorKind::Data,
            message: message.into(),
        }
    }

    pub fn check(message: impl Into<String>) -> Self {
        Self {
            kind: CliErrorKind::Check,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::data(format!("{}: {e}", path.display()))
    }

    pub fn context(self, path: &Path) -> Self {
        Self {
            message: format!("{}: {}", path.display(), self.message),
            ..self
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            CliErrorKind::Usage => EXIT_USAGE,
            CliErrorKind::Data => EXIT_DATA,
            CliErrorKind::Check => EXIT_CHECK,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<AtaError> for CliError {
    fn from(e: AtaError) -> Self {
        match e {
            AtaError::InvalidArgument(_) | AtaError::TooLarge(_) => Self::usage(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}
