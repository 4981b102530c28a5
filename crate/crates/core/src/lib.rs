//! Human-in-the-loop thematic analysis with a large language model.
//!
//! The crate covers the data model, token-aware batching, the model gateway,
//! prompt assembly, the pipeline stages, evaluation and run persistence.

pub mod domain;
pub mod evaluation;
pub mod gateway;
pub mod pipeline;
pub mod prompt;
pub mod run;
pub mod store;
pub mod synthetic;
pub mod tokens;

pub use domain::*;
pub use evaluation::{recall_at_k, tally_quality, theme_mapping, MappingMatrix, QualityTally, RecallReport};
pub use gateway::{
    AuditRecord, AuditSink, ChatBackend, CompletionRequest, CompletionResponse, Gateway,
    GatewayError, RetryPolicy,
};
pub use pipeline::{apply_feedback, Feedback, Pipeline, PipelineError};
pub use prompt::{PromptBuilder, PromptLimits, StageParams};
pub use run::{Review, Run, RunError, RunSettings, RunView};
pub use store::{RunStore, StoreError};
pub use tokens::{Batch, BatchItem, HeuristicCounter, TokenBudget, TokenCounter, WordCounter};
