use axum::extract::rejection::QueryRejection;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

use thematic_core::evaluation::EvalError;
use thematic_core::gateway::GatewayError;
use thematic_core::{PipelineError, RunError, Stage, StoreError};

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status: status.as_u16(),
            code: code.into(),
            message: message.into(),
            stage: None,
            round: None,
            batch: None,
        }
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NOT_FOUND", message)
    }

    pub fn run_not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "RUN_NOT_FOUND", format!("no run named {id:?}"))
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "INVALID_PAYLOAD", message)
    }

    pub fn conflict(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", message)
    }

    fn at(mut self, stage: Stage, round: u32, batch: usize) -> Self {
        self.stage = Some(stage);
        self.round = Some(round);
        self.batch = Some(batch);
        self
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let msg = e.to_string();
        match e {
            StoreError::NotARun(_) => Self::new(StatusCode::NOT_FOUND, "RUN_NOT_FOUND", msg),
            StoreError::Exists(_) => Self::conflict("RUN_EXISTS", msg),
            StoreError::Locked(_) => Self::conflict("RUN_LOCKED", msg),
            StoreError::Invalid(_) => Self::invalid(msg),
            StoreError::DigestMismatch { .. } | StoreError::Corrupt { .. } => {
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "RUN_CORRUPT", msg)
            }
            StoreError::Io { .. } | StoreError::ReadOnly(_) => Self::internal(msg),
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let msg = e.to_string();
        let base = match &e {
            PipelineError::Gateway(GatewayError::Audit(_)) | PipelineError::Checkpoint(_) => Self::internal(msg),
            PipelineError::Gateway(_) => Self::new(StatusCode::BAD_GATEWAY, "BACKEND_FAILED", msg),
            PipelineError::InvalidOutput { .. } => Self::new(StatusCode::BAD_GATEWAY, "INVALID_MODEL_OUTPUT", msg),
            PipelineError::Prompt { .. } => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "PROMPT_TOO_LARGE", msg),
            PipelineError::Precondition(_) => Self::conflict("INVALID_STATE", msg),
        };
        match e.locus() {
            Some(tag) => base.at(tag.stage, tag.round, tag.batch),
            None => base,
        }
    }
}

impl From<RunError> for ApiError {
    fn from(e: RunError) -> Self {
        let msg = e.to_string();
        match e {
            RunError::Store(s) => s.into(),
            RunError::Pipeline(p) => p.into(),
            RunError::ThemesUnapproved => Self::conflict("THEMES_UNAPPROVED", msg),
            RunError::State(_) => Self::conflict("INVALID_STATE", msg),
            RunError::Validation(_) | RunError::Feedback(_) | RunError::Config(_) => Self::invalid(msg),
            RunError::Eval(EvalError::ZeroK) => Self::invalid(msg),
            RunError::Eval(_) => Self::conflict("EVALUATION_UNAVAILABLE", msg),
            RunError::Prompt(_) => Self::internal(msg),
        }
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::invalid(e.body_text())
    }
}
