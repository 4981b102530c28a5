//! Uniform access to a chat-completion backend.
//!
//! A [`Gateway`] wraps a [`ChatBackend`] (the live HTTP provider or the
//! [`ScriptedBackend`]) and adds the context-limit precheck, bounded retry
//! with exponential backoff, and an audit record for every provider call.
//! [`Gateway::complete_structured`] adds JSON extraction, shape validation
//! and corrective re-prompting on top.

mod live;
mod scripted;
mod structured;

use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{GenerationParams, Stage};
use crate::tokens::TokenCounter;

pub use live::{LiveBackend, LiveConfig, API_KEY_ENV};
pub use scripted::{FaultKind, IdTable, Script, ScriptEntry, ScriptStep, ScriptedBackend};
pub use structured::{corrective_message, extract_json, Field, Schema, SchemaError};

/// Identifies which stage, round and batch a model call belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CallTag {
    pub stage: Stage,
    pub round: u32,
    pub batch: usize,
}

impl CallTag {
    pub fn new(stage: Stage, round: u32, batch: usize) -> Self {
        Self {
            stage,
            round,
            batch,
        }
    }
}

impl std::fmt::Display for CallTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} round {} batch {}", self.stage, self.round, self.batch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub system_message: String,
    pub user_message: String,
    pub params: GenerationParams,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt: usize,
    pub completion: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub token_usage: TokenUsage,
    pub backend_id: String,
    /// Provider calls spent, including failed transport attempts.
    pub attempts: u32,
}

/// What a backend sees for one provider call.
#[derive(Debug)]
pub struct BackendCall<'a> {
    pub tag: &'a CallTag,
    pub system: &'a str,
    pub user: &'a str,
    pub params: &'a GenerationParams,
    pub counter: &'a dyn TokenCounter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub text: String,
    pub usage: TokenUsage,
    /// Provider, model, and any provider-reported fingerprint.
    pub backend_id: String,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("rate limited: {message}")]
    RateLimited {
        message: String,
        retry_after: Option<Duration>,
    },
    #[error("provider rejected the prompt as too long: {0}")]
    ContextOverflow(String),
    #[error("provider error: {0}")]
    Fatal(String),
}

impl BackendError {
    fn retryable(&self) -> bool {
        matches!(
            self,
            BackendError::Transport(_) | BackendError::RateLimited { .. }
        )
    }
}

pub trait ChatBackend: Send + Sync {
    fn backend_id(&self) -> String;

    fn send(&self, call: &BackendCall<'_>) -> Result<BackendReply, BackendError>;
}

/// One provider interaction as written to the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub stage: Stage,
    pub round: u32,
    pub batch: usize,
    /// 1-based provider attempt within one `complete` call.
    pub attempt: u32,
    /// 0-based repair attempt within one structured call.
    pub repair: u32,
    pub request_digest: String,
    pub system: String,
    pub user: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<TokenUsage>,
}

/// A persisted audit record with its run-wide sequence number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    #[serde(flatten)]
    pub record: AuditRecord,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("audit log write failed: {0}")]
pub struct AuditError(pub String);

pub trait AuditSink: Send + Sync {
    fn record(&self, record: AuditRecord) -> Result<u64, AuditError>;
}

/// Keeps audit events in memory.
#[derive(Debug, Default)]
pub struct MemoryAudit {
    events: Mutex<Vec<AuditEvent>>,
}

impl MemoryAudit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> Vec<AuditEvent> {
        self.events.lock().unwrap().clone()
    }
}

impl AuditSink for MemoryAudit {
    fn record(&self, record: AuditRecord) -> Result<u64, AuditError> {
        let mut events = self.events.lock().unwrap();
        let seq = events.len() as u64 + 1;
        events.push(AuditEvent {
            seq,
            timestamp: Utc::now(),
            record,
        });
        Ok(seq)
    }
}

/// Hex SHA-256 of the request channels and parameters.
pub fn request_digest(system: &str, user: &str, params: &GenerationParams) -> String {
    let mut h = Sha256::new();
    h.update(system.as_bytes());
    h.update([0u8]);
    h.update(user.as_bytes());
    h.update([0u8]);
    h.update(serde_json::to_vec(params).expect("params serialize"));
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Total provider attempts for transport failures and rate limits.
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    /// Total attempts for a structured call, including the first.
    pub structured_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
            structured_attempts: 3,
        }
    }
}

impl RetryPolicy {
    /// No sleeping between attempts; for tests and scripted runs.
    pub fn immediate() -> Self {
        Self {
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
            ..Self::default()
        }
    }

    fn delay(&self, attempt: u32, hint: Option<Duration>) -> Duration {
        let exp = self
            .base_delay
            .saturating_mul(1u32 << (attempt - 1).min(16));
        hint.unwrap_or(exp).min(self.max_delay)
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("{tag}: prompt needs {needed} tokens with completion, context limit is {limit}")]
    ContextOverflow {
        tag: CallTag,
        needed: usize,
        limit: usize,
    },
    #[error("{tag}: backend failed after {attempts} attempt(s): {source}")]
    Backend {
        tag: CallTag,
        attempts: u32,
        #[source]
        source: BackendError,
    },
    #[error("{tag}: no valid structured output after {} attempt(s): {last_error}", attempts.len())]
    Structured {
        tag: CallTag,
        attempts: Vec<String>,
        last_error: String,
    },
    #[error(transparent)]
    Audit(#[from] AuditError),
}

impl GatewayError {
    pub fn tag(&self) -> Option<&CallTag> {
        match self {
            GatewayError::ContextOverflow { tag, .. }
            | GatewayError::Backend { tag, .. }
            | GatewayError::Structured { tag, .. } => Some(tag),
            GatewayError::Audit(_) => None,
        }
    }
}

/// Parsed structured output plus how many repairs it took.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredResponse {
    pub value: serde_json::Value,
    pub retry_count: u32,
    pub raw_attempts: Vec<String>,
}

#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    counter: Arc<dyn TokenCounter>,
    audit: Arc<dyn AuditSink>,
    retry: RetryPolicy,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.backend_id())
            .field("counter", &self.counter.name())
            .field("retry", &self.retry)
            .finish()
    }
}

impl Gateway {
    pub fn new(
        backend: Arc<dyn ChatBackend>,
        counter: Arc<dyn TokenCounter>,
        audit: Arc<dyn AuditSink>,
    ) -> Self {
        Self {
            backend,
            counter,
            audit,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Same backend and policy, different audit destination.
    pub fn with_audit(&self, audit: Arc<dyn AuditSink>) -> Self {
        Self {
            audit,
            ..self.clone()
        }
    }

    pub fn counter(&self) -> &Arc<dyn TokenCounter> {
        &self.counter
    }

    pub fn backend_id(&self) -> String {
        self.backend.backend_id()
    }

    pub fn complete(
        &self,
        req: &CompletionRequest,
        tag: &CallTag,
    ) -> Result<CompletionResponse, GatewayError> {
        self.complete_inner(req, tag, 0)
    }

    fn complete_inner(
        &self,
        req: &CompletionRequest,
        tag: &CallTag,
        repair: u32,
    ) -> Result<CompletionResponse, GatewayError> {
        let prompt_tokens =
            self.counter.count(&req.system_message) + self.counter.count(&req.user_message);
        let needed = prompt_tokens + req.params.max_tokens;
        if needed > req.params.context_limit {
            return Err(GatewayError::ContextOverflow {
                tag: tag.clone(),
                needed,
                limit: req.params.context_limit,
            });
        }
        let digest = request_digest(&req.system_message, &req.user_message, &req.params);
        let call = BackendCall {
            tag,
            system: &req.system_message,
            user: &req.user_message,
            params: &req.params,
            counter: self.counter.as_ref(),
        };
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = self.backend.send(&call);
            let mut record = AuditRecord {
                stage: tag.stage,
                round: tag.round,
                batch: tag.batch,
                attempt,
                repair,
                request_digest: digest.clone(),
                system: req.system_message.clone(),
                user: req.user_message.clone(),
                response: None,
                error: None,
                backend_id: None,
                usage: None,
            };
            match result {
                Ok(reply) => {
                    record.response = Some(reply.text.clone());
                    record.backend_id = Some(reply.backend_id.clone());
                    record.usage = Some(reply.usage);
                    self.audit.record(record)?;
                    return Ok(CompletionResponse {
                        text: reply.text,
                        token_usage: reply.usage,
                        backend_id: reply.backend_id,
                        attempts: attempt,
                    });
                }
                Err(err) => {
                    record.error = Some(err.to_string());
                    self.audit.record(record)?;
                    if !err.retryable() || attempt >= self.retry.max_attempts {
                        return Err(GatewayError::Backend {
                            tag: tag.clone(),
                            attempts: attempt,
                            source: err,
                        });
                    }
                    let hint = match &err {
                        BackendError::RateLimited { retry_after, .. } => *retry_after,
                        _ => None,
                    };
                    let wait = self.retry.delay(attempt, hint);
                    tracing::warn!(%tag, attempt, ?wait, error = %err, "retrying model call");
                    if !wait.is_zero() {
                        thread::sleep(wait);
                    }
                }
            }
        }
    }

    /// Calls the model until its output parses as JSON matching `schema`,
    /// re-prompting with the validation error appended to the user message.
    pub fn complete_structured(
        &self,
        req: &CompletionRequest,
        tag: &CallTag,
        schema: &Schema,
    ) -> Result<StructuredResponse, GatewayError> {
        let max = self.retry.structured_attempts.max(1);
        let mut raw_attempts = Vec::new();
        let mut current = req.clone();
        let mut last_error = String::new();
        for repair in 0..max {
            let resp = self.complete_inner(&current, tag, repair)?;
            raw_attempts.push(resp.text.clone());
            match structured::parse_against(&resp.text, schema) {
                Ok(value) => {
                    return Ok(StructuredResponse {
                        value,
                        retry_count: repair,
                        raw_attempts,
                    })
                }
                Err(e) => {
                    tracing::debug!(%tag, repair, error = %e, "structured output rejected");
                    last_error = e;
                    current = CompletionRequest {
                        user_message: format!(
                            "{}\n\n{}",
                            req.user_message,
                            corrective_message(&last_error)
                        ),
                        ..req.clone()
                    };
                }
            }
        }
        Err(GatewayError::Structured {
            tag: tag.clone(),
            attempts: raw_attempts,
            last_error,
        })
    }
}
