//! Error type mapped onto the process exit codes.

use std::fmt;

/// Exit codes: 0 success, 2 usage, 3 dependency, 4 data/format.
#[derive(Debug)]
pub enum LabError {
    /// Bad invocation: unknown experiment, invalid flag values.
    Usage(String),
    /// A required artifact (checkpoint, dataset) is missing.
    Dependency(String),
    /// Broken data or file formats, IO failures, invalid config values.
    Data(String),
}

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Usage(_) => 2,
            LabError::Dependency(_) => 3,
            LabError::Data(_) => 4,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        LabError::Usage(msg.into())
    }

    pub fn dependency(msg: impl Into<String>) -> Self {
        LabError::Dependency(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        LabError::Data(msg.into())
    }
}

impl fmt::Display for LabError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabError::Usage(m) => write!(f, "usage error: {m}"),
            LabError::Dependency(m) => write!(f, "dependency error: {m}"),
            LabError::Data(m) => write!(f, "data error: {m}"),
        }
    }
}

impl std::error::Error for LabError {}

impl From<std::io::Error> for LabError {
    fn from(e: std::io::Error) -> Self {
        LabError::Data(format!("io: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
