#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use thematic_core::gateway::{BackendCall, BackendError, BackendReply, ScriptedBackend};
use thematic_core::store::{AUDIT, EVENTS, MANIFEST};
use thematic_core::synthetic::Scenario;
use thematic_core::{ChatBackend, RetryPolicy, Run, RunError, RunStore};

/// Files whose bytes depend on wall-clock time or call timing.
pub const VOLATILE: [&str; 4] = [MANIFEST, AUDIT, EVENTS, ".lock"];

pub fn ingest(dir: &Path, s: &Scenario) -> Arc<RunStore> {
    Arc::new(Run::ingest(dir, &s.dataset, &s.context, s.settings.clone()).expect("ingest"))
}

pub fn open(store: Arc<RunStore>, backend: Arc<dyn ChatBackend>) -> Run {
    Run::open(store, backend, RetryPolicy::immediate()).expect("open run")
}

pub fn scripted(s: &Scenario) -> Arc<dyn ChatBackend> {
    Arc::new(ScriptedBackend::new(s.script()))
}

/// Code, collate, merge, approve and classify. Safe to call again after an
/// interruption: finished stages are read back, not redone.
pub fn drive(run: &Run) -> Result<(), RunError> {
    run.code(None, None)?;
    run.collate(None)?;
    run.merge(None)?;
    if run.store().approved_themes()?.is_none() {
        run.approve_themes(None)?;
    }
    run.classify(None, None, false)?;
    Ok(())
}

/// Contents of every file in a run directory except the volatile ones.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if !VOLATILE.contains(&name.as_str()) {
            out.insert(name, std::fs::read(&path).unwrap());
        }
    }
    out
}

/// Forwards calls to `inner` until `budget` calls have been made, then fails
/// every call as if the process had died.
pub struct KillSwitch {
    inner: Arc<dyn ChatBackend>,
    budget: usize,
    calls: AtomicUsize,
}

impl KillSwitch {
    pub fn new(inner: Arc<dyn ChatBackend>, budget: usize) -> Self {
        Self {
            inner,
            budget,
            calls: AtomicUsize::new(0),
        }
    }
}

impl ChatBackend for KillSwitch {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }

    fn send(&self, call: &BackendCall<'_>) -> Result<BackendReply, BackendError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.budget {
            return Err(BackendError::Fatal("killed".into()));
        }
        self.inner.send(call)
    }
}

/// Counts the calls it forwards.
pub struct Counting {
    inner: Arc<dyn ChatBackend>,
    pub calls: AtomicUsize,
}

impl Counting {
    pub fn new(inner: Arc<dyn ChatBackend>) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for Counting {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }

    fn send(&self, call: &BackendCall<'_>) -> Result<BackendReply, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.send(call)
    }
}
