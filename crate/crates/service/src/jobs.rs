//! Per-run state held by the service: the cached writer handle and the
//! background stage job with its progress.

use std::path::Path;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use thematic_core::pipeline::{Progress, ProgressFn};
use thematic_core::{ChatBackend, RetryPolicy, Run, RunError, RunStore, Stage};

use crate::error::ApiError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveStage {
    pub stage: Stage,
    pub round: Option<u32>,
    pub done: usize,
    pub total: usize,
    pub started_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobOutcome {
    pub stage: Stage,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ApiError>,
    pub finished_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobState {
    pub active: Option<ActiveStage>,
    pub last: Option<JobOutcome>,
}

pub(crate) struct RunSlot {
    writer: Mutex<Option<Arc<RunStore>>>,
    job: Mutex<JobState>,
    version: watch::Sender<u64>,
}

impl RunSlot {
    pub(crate) fn new() -> Self {
        Self {
            writer: Mutex::new(None),
            job: Mutex::new(JobState::default()),
            version: watch::Sender::new(0),
        }
    }

    /// The run's writable handle, opened on first use and kept, so the
    /// service stays the run's single writer while it runs.
    pub(crate) fn writer(&self, dir: &Path) -> Result<Arc<RunStore>, ApiError> {
        let mut w = self.writer.lock().unwrap();
        if let Some(s) = &*w {
            return Ok(s.clone());
        }
        let store = Arc::new(RunStore::open(dir)?);
        *w = Some(store.clone());
        Ok(store)
    }

    pub(crate) fn adopt(&self, store: Arc<RunStore>) {
        *self.writer.lock().unwrap() = Some(store);
    }

    pub(crate) fn job(&self) -> JobState {
        self.job.lock().unwrap().clone()
    }

    pub(crate) fn subscribe(&self) -> watch::Receiver<u64> {
        self.version.subscribe()
    }

    fn bump(&self) {
        self.version.send_modify(|v| *v += 1);
    }

    pub(crate) fn ensure_idle(&self) -> Result<(), ApiError> {
        match &self.job.lock().unwrap().active {
            Some(a) => Err(stage_running(a.stage)),
            None => Ok(()),
        }
    }

    /// Runs `work` on a blocking thread as the run's only active stage.
    pub(crate) fn start<F>(
        self: &Arc<Self>,
        stage: Stage,
        store: Arc<RunStore>,
        backend: Arc<dyn ChatBackend>,
        retry: RetryPolicy,
        work: F,
    ) -> Result<ActiveStage, ApiError>
    where
        F: FnOnce(&Run) -> Result<(), RunError> + Send + 'static,
    {
        let active = {
            let mut job = self.job.lock().unwrap();
            if let Some(a) = &job.active {
                return Err(stage_running(a.stage));
            }
            let active = ActiveStage {
                stage,
                round: None,
                done: 0,
                total: 0,
                started_at: Utc::now(),
            };
            job.active = Some(active.clone());
            active
        };
        self.bump();

        let slot = self.clone();
        tokio::task::spawn_blocking(move || {
            let progress_slot = slot.clone();
            let progress: Arc<ProgressFn> = Arc::new(move |p: Progress| {
                if let Some(a) = progress_slot.job.lock().unwrap().active.as_mut() {
                    a.round = Some(p.round);
                    a.done = p.done;
                    a.total = p.total;
                }
                progress_slot.bump();
            });
            let result = Run::open(store, backend, retry).and_then(|run| work(&run.with_progress(progress)));
            if let Err(e) = &result {
                tracing::warn!(%stage, error = %e, "stage failed");
            }
            let mut job = slot.job.lock().unwrap();
            job.active = None;
            job.last = Some(JobOutcome {
                stage,
                ok: result.is_ok(),
                error: result.err().map(ApiError::from),
                finished_at: Utc::now(),
            });
            drop(job);
            slot.bump();
        });
        Ok(active)
    }
}

fn stage_running(stage: Stage) -> ApiError {
    ApiError::conflict("STAGE_RUNNING", format!("the {stage} stage is already running on this run"))
}
