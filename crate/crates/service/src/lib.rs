//! Local HTTP facade over a directory of runs, used by the review UI and by
//! scripts. There is no authentication; bind it to localhost.

mod error;
mod extract;
mod jobs;
mod routes;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::Router;
use thematic_core::{ChatBackend, RetryPolicy};

pub use error::ApiError;
pub use jobs::{ActiveStage, JobOutcome, JobState};
pub use routes::{CodeItem, CodePage, CreateRun, FeedbackRequest, ProgressReply, RunSummary, StageRequest, StageStatus};

use jobs::RunSlot;

/// Builds a backend for each stage job.
pub type BackendFactory = Arc<dyn Fn() -> Result<Arc<dyn ChatBackend>, String> + Send + Sync>;

#[derive(Clone)]
pub struct ServiceConfig {
    /// Directory holding one subdirectory per run.
    pub root: PathBuf,
    pub backend: BackendFactory,
    pub retry: RetryPolicy,
    /// Longest a progress request waits for a change.
    pub max_wait: Duration,
}

impl ServiceConfig {
    pub fn new(root: impl Into<PathBuf>, backend: BackendFactory) -> Self {
        Self {
            root: root.into(),
            backend,
            retry: RetryPolicy::default(),
            max_wait: Duration::from_secs(30),
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    config: Arc<ServiceConfig>,
    slots: Arc<Mutex<HashMap<String, Arc<RunSlot>>>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self {
            config: Arc::new(config),
            slots: Arc::default(),
        }
    }

    fn run_dir(&self, id: &str) -> Result<PathBuf, ApiError> {
        if !valid_run_id(id) {
            return Err(ApiError::run_not_found(id));
        }
        let dir = self.config.root.join(id);
        if !dir.join(thematic_core::store::MANIFEST).is_file() {
            return Err(ApiError::run_not_found(id));
        }
        Ok(dir)
    }

    fn slot(&self, id: &str) -> Arc<RunSlot> {
        self.slots
            .lock()
            .unwrap()
            .entry(id.to_string())
            .or_insert_with(|| Arc::new(RunSlot::new()))
            .clone()
    }

    fn root(&self) -> &Path {
        &self.config.root
    }
}

/// Run ids become directory names: letters, digits, `-`, `_` and `.`, not
/// starting with a dot.
pub fn valid_run_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

pub fn router(state: AppState) -> Router {
    routes::router().with_state(state)
}

pub async fn serve(addr: SocketAddr, config: ServiceConfig) -> std::io::Result<()> {
    std::fs::create_dir_all(&config.root)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, root = %config.root.display(), "review service listening");
    axum::serve(listener, router(AppState::new(config))).await
}
