//! Command failures mapped to process exit codes.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 1,
            ErrorKind::Data => 2,
            ErrorKind::Runtime => 3,
        }
    }
}

/// A failure tagged with the pipeline stage that raised it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub stage: String,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.message)
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn new(kind: ErrorKind, stage: &str, message: impl fmt::Display) -> Self {
        Self { kind, stage: stage.to_string(), message: message.to_string() }
    }

    pub fn config(stage: &str, message: impl fmt::Display) -> Self {
        Self::new(ErrorKind::Config, stage, message)
    }

    pub fn data(stage: &str, message: impl fmt::Display) -> Self {
        Self::new(ErrorKind::Data, stage, message)
    }

    pub fn runtime(stage: &str, message: impl fmt::Display) -> Self {
        Self::new(ErrorKind::Runtime, stage, message)
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }

    /// Classifies a core error.
    pub fn from_core(stage: &str, e: aacap_core::Error) -> Self {
        use aacap_core::Error as E;
        let kind = match e {
            E::Config(_) => ErrorKind::Config,
            E::Data(_) | E::ClipTooShort { .. } | E::Translation { .. } => ErrorKind::Data,
            _ => ErrorKind::Runtime,
        };
        Self::new(kind, stage, e)
    }

    pub fn io(stage: &str, path: &std::path::Path, e: std::io::Error) -> Self {
        Self::data(stage, format!("{}: {e}", path.display()))
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attaches a stage name to core results.
pub trait StageExt<T> {
    fn stage(self, stage: &str) -> CliResult<T>;
}

impl<T> StageExt<T> for aacap_core::Result<T> {
    fn stage(self, stage: &str) -> CliResult<T> {
        self.map_err(|e| CliError::from_core(stage, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::from_core("x", aacap_core::Error::Config("bad".into())).exit_code(), 1);
        assert_eq!(CliError::from_core("x", aacap_core::Error::Data("bad".into())).exit_code(), 2);
        assert_eq!(CliError::from_core("x", aacap_core::Error::NonFinite { op: "softmax" }).exit_code(), 3);
    }
}
