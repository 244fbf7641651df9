use std::fmt;

use delib_core::engine::RunFailure;
use delib_core::{BackendError, EngineError, EvalError, MemoryError, ProfileError};
use delib_core::prompting::PromptError;

/// A failure with a stable, machine-readable kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn new(kind: impl Into<String>, message: impl Into<String>) -> Self {
        CliError {
            kind: kind.into(),
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError::new("usage", message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError::new("io", message)
    }

    pub fn exit_code(&self) -> i32 {
        if self.kind == "usage" {
            2
        } else {
            1
        }
    }

    /// `error[<kind>]: <message>` with the message folded onto one line.
    pub fn line(&self) -> String {
        let msg: Vec<&str> = self.message.split_whitespace().collect();
        format!("error[{}]: {}", self.kind, msg.join(" "))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl std::error::Error for CliError {}

pub fn backend_kind(e: &BackendError) -> String {
    let v = serde_json::to_value(e.kind).unwrap_or_default();
    format!("backend.{}", v.as_str().unwrap_or("unknown"))
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        CliError::new(backend_kind(&e), e.to_string())
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        let kind = match &e {
            EngineError::Parse(_) => "parse".to_string(),
            EngineError::Validation(_) => "validation".to_string(),
            EngineError::Io(_) => "io".to_string(),
            EngineError::UnknownAgent(_) => "unknown_agent".to_string(),
            EngineError::Phase(_) => "phase".to_string(),
            EngineError::Finished => "finished".to_string(),
            EngineError::Backend { source, .. } => backend_kind(source),
            EngineError::EmptyResponse { .. } => "empty_response".to_string(),
            EngineError::Aborted(_) => "aborted".to_string(),
            EngineError::Memory(_) => "memory".to_string(),
            EngineError::Profile(_) => "profile".to_string(),
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<RunFailure> for CliError {
    fn from(f: RunFailure) -> Self {
        CliError::from(f.error)
    }
}

impl From<ProfileError> for CliError {
    fn from(e: ProfileError) -> Self {
        let kind = match &e {
            ProfileError::Parse(_) => "parse".to_string(),
            ProfileError::Validation(_) => "validation".to_string(),
            ProfileError::Io { .. } => "io".to_string(),
            ProfileError::Backend(b) => backend_kind(b),
            ProfileError::Extraction(_) => "extraction".to_string(),
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<MemoryError> for CliError {
    fn from(e: MemoryError) -> Self {
        let kind = match &e {
            MemoryError::TimestepOrder { .. } | MemoryError::Validation(_) => "validation",
            MemoryError::Parse(_) => "parse",
            MemoryError::Io { .. } => "io",
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let kind = match &e {
            EvalError::Parse(_) => "parse",
            EvalError::Io(_) => "io",
            EvalError::Range { .. } => "range",
            EvalError::Pairing(_) => "pairing",
            _ => "eval",
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        CliError::new("template", e.to_string())
    }
}
