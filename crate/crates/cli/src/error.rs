use thematic_core::gateway::GatewayError;
use thematic_core::{PipelineError, RunError, StoreError};

/// Failure classes, each with its own process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failure {
    Other,
    Usage,
    Config,
    Data,
    Backend,
    Validation,
}

impl Failure {
    pub fn exit_code(self) -> u8 {
        match self {
            Failure::Other => 1,
            Failure::Usage => 2,
            Failure::Config => 3,
            Failure::Data => 4,
            Failure::Backend => 5,
            Failure::Validation => 6,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: Failure,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Failure, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(Failure::Usage, message)
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Failure::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(Failure::Data, message)
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(Failure::Validation, message)
    }

    pub fn other(message: impl Into<String>) -> Self {
        Self::new(Failure::Other, message)
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        let kind = match &e {
            StoreError::NotARun(_) | StoreError::Exists(_) => Failure::Config,
            StoreError::Invalid(_) => Failure::Validation,
            StoreError::Io { .. } | StoreError::DigestMismatch { .. } | StoreError::Corrupt { .. } => Failure::Data,
            StoreError::Locked(_) | StoreError::ReadOnly(_) => Failure::Other,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let kind = match &e {
            PipelineError::Gateway(GatewayError::Audit(_)) | PipelineError::Checkpoint(_) => Failure::Other,
            PipelineError::Gateway(_) | PipelineError::InvalidOutput { .. } => Failure::Backend,
            PipelineError::Prompt { .. } | PipelineError::Precondition(_) => Failure::Validation,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Store(s) => s.into(),
            RunError::Pipeline(p) => p.into(),
            RunError::Config(_) => Self::config(e.to_string()),
            RunError::Prompt(_) => Self::config(e.to_string()),
            RunError::Eval(_)
            | RunError::Feedback(_)
            | RunError::ThemesUnapproved
            | RunError::State(_)
            | RunError::Validation(_) => Self::validation(e.to_string()),
        }
    }
}
