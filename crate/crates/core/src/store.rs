//! Append-only run directory.
//!
//! ```text
//! <run>/manifest.json          run id, dataset digest, settings
//! <run>/dataset.jsonl          the ingested dataset
//! <run>/contexts.jsonl         analysis context, one snapshot per round
//! <run>/<stage>-r<round>.jsonl batch plan, then one line per committed batch
//! <run>/themes.jsonl           proposed and approved theme sets
//! <run>/feedback.jsonl         expert feedback per round
//! <run>/annotations.jsonl      quality verdicts on initial codes
//! <run>/audit.jsonl            every model call, with seq and timestamp
//! <run>/events.jsonl           every mutation, with seq and timestamp
//! ```
//!
//! Every line is written with a single append followed by a data sync; a
//! line without its trailing newline is the remains of an interrupted write
//! and is dropped when the run is reopened. Stage files, contexts and themes
//! carry no timestamps, so two identical runs produce identical bytes.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{parse_dataset, AnalysisContext, Dataset, QualityAnnotation, Stage, ThemeSet};
use crate::gateway::{AuditError, AuditEvent, AuditRecord, AuditSink};
use crate::pipeline::{Checkpoint, CheckpointError, Feedback, StageKey, StagePlan, StageProgress};
use crate::run::RunSettings;

pub const MANIFEST: &str = "manifest.json";
pub const DATASET: &str = "dataset.jsonl";
pub const CONTEXTS: &str = "contexts.jsonl";
pub const THEMES: &str = "themes.jsonl";
pub const FEEDBACK: &str = "feedback.jsonl";
pub const ANNOTATIONS: &str = "annotations.jsonl";
pub const AUDIT: &str = "audit.jsonl";
pub const EVENTS: &str = "events.jsonl";
const LOCK: &str = ".lock";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{0} is not a run directory (no manifest.json)")]
    NotARun(PathBuf),
    #[error("{0} already holds a run")]
    Exists(PathBuf),
    #[error("run {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("run {0} was opened read-only")]
    ReadOnly(PathBuf),
    #[error("dataset digest mismatch: run has {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },
    #[error("{path} line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |e| StoreError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub run_id: String,
    pub dataset_name: String,
    /// Hex SHA-256 of `dataset.jsonl`.
    pub dataset_digest: String,
    pub created_at: DateTime<Utc>,
    pub settings: RunSettings,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSnapshot {
    pub round: u32,
    pub context: AnalysisContext,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    /// Round whose codes the feedback is about.
    pub round: u32,
    pub feedback: Feedback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThemeStatus {
    Proposed,
    Approved,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThemeRecord {
    pub status: ThemeStatus,
    /// Merge round the set comes from; 0 for a set supplied by the expert.
    pub round: u32,
    pub themes: ThemeSet,
    /// True when the approved set differs from the proposal.
    #[serde(default)]
    pub edited: bool,
}

/// A mutation of the run, for the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    pub kind: String,
    #[serde(default)]
    pub detail: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum StageLine {
    Plan(StagePlan),
    Batch { index: usize, output: Value },
}

/// Parses complete lines; bytes after the last newline are ignored.
fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let end = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
    let text = std::str::from_utf8(&bytes[..end]).map_err(|e| StoreError::Corrupt {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StoreError::Corrupt {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Cuts a trailing partial line left by an interrupted append.
fn repair_tail(path: &Path) -> Result<bool, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let end = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
    if end == bytes.len() {
        return Ok(false);
    }
    let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
    f.set_len(end as u64).map_err(io_err(path))?;
    f.sync_data().map_err(io_err(path))?;
    tracing::warn!(path = %path.display(), dropped = bytes.len() - end, "dropped partial line");
    Ok(true)
}

fn sha256_file(path: &Path) -> Result<String, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hex SHA-256 of the dataset as stored in a run.
pub fn dataset_digest(ds: &Dataset) -> String {
    hex::encode(Sha256::digest(ds.to_jsonl().as_bytes()))
}

#[derive(Debug, Default)]
struct Counters {
    audit_seq: u64,
    event_seq: u64,
}

/// Handle on one run directory. A writable handle holds the run's advisory
/// lock until dropped.
#[derive(Debug)]
pub struct RunStore {
    dir: PathBuf,
    manifest: Manifest,
    lock: Option<File>,
    counters: Mutex<Counters>,
}

impl RunStore {
    /// Creates a run for `dataset` in `dir` (created if missing, must not
    /// already hold a run) and locks it.
    pub fn create(dir: &Path, dataset: &Dataset, settings: RunSettings) -> Result<Self, StoreError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        if dir.join(MANIFEST).exists() {
            return Err(StoreError::Exists(dir.to_path_buf()));
        }
        let lock = Self::acquire(dir)?;
        let data = dir.join(DATASET);
        fs::write(&data, dataset.to_jsonl()).map_err(io_err(&data))?;
        let manifest = Manifest {
            format: FORMAT_VERSION,
            run_id: run_id_of(dir),
            dataset_name: dataset.name().to_string(),
            dataset_digest: dataset_digest(dataset),
            created_at: Utc::now(),
            settings,
        };
        let tmp = dir.join("manifest.json.tmp");
        let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        fs::write(&tmp, body).map_err(io_err(&tmp))?;
        fs::rename(&tmp, dir.join(MANIFEST)).map_err(io_err(dir))?;
        let store = Self {
            dir: dir.to_path_buf(),
            manifest,
            lock: Some(lock),
            counters: Mutex::new(Counters::default()),
        };
        store.log_event("ingest", serde_json::json!({"dataset": dataset.name(), "points": dataset.len()}))?;
        Ok(store)
    }

    /// Opens an existing run for writing: takes the lock, drops partial
    /// trailing lines and checks the dataset digest.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let manifest = Self::read_manifest(dir)?;
        let lock = Self::acquire(dir)?;
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let path = entry.map_err(io_err(dir))?.path();
            if path.extension().is_some_and(|e| e == "jsonl") {
                repair_tail(&path)?;
            }
        }
        let store = Self::assemble(dir, manifest, Some(lock))?;
        store.check_digest()?;
        Ok(store)
    }

    /// Opens a run without the lock. Writes fail with [`StoreError::ReadOnly`].
    pub fn open_read(dir: &Path) -> Result<Self, StoreError> {
        let manifest = Self::read_manifest(dir)?;
        Self::assemble(dir, manifest, None)
    }

    fn assemble(dir: &Path, manifest: Manifest, lock: Option<File>) -> Result<Self, StoreError> {
        let store = Self {
            dir: dir.to_path_buf(),
            manifest,
            lock,
            counters: Mutex::new(Counters::default()),
        };
        let audit_seq = store.audit_events()?.last().map_or(0, |e| e.seq);
        let event_seq = store.events()?.last().map_or(0, |e| e.seq);
        *store.counters.lock().unwrap() = Counters { audit_seq, event_seq };
        Ok(store)
    }

    fn read_manifest(dir: &Path) -> Result<Manifest, StoreError> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(StoreError::NotARun(dir.to_path_buf()));
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
            path: path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if m.format != FORMAT_VERSION {
            return Err(StoreError::Invalid(format!("unsupported run format {}", m.format)));
        }
        Ok(m)
    }

    fn acquire(dir: &Path) -> Result<File, StoreError> {
        let path = dir.join(LOCK);
        let f = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(io_err(&path))?;
        match f.try_lock() {
            Ok(()) => Ok(f),
            Err(std::fs::TryLockError::WouldBlock) => Err(StoreError::Locked(dir.to_path_buf())),
            Err(std::fs::TryLockError::Error(e)) => Err(io_err(&path)(e)),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn is_writable(&self) -> bool {
        self.lock.is_some()
    }

    pub fn check_digest(&self) -> Result<(), StoreError> {
        let found = sha256_file(&self.dir.join(DATASET))?;
        if found != self.manifest.dataset_digest {
            return Err(StoreError::DigestMismatch {
                expected: self.manifest.dataset_digest.clone(),
                found,
            });
        }
        Ok(())
    }

    /// Errors unless `ds` is the dataset this run was created from.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<(), StoreError> {
        let found = dataset_digest(ds);
        if found != self.manifest.dataset_digest {
            return Err(StoreError::DigestMismatch {
                expected: self.manifest.dataset_digest.clone(),
                found,
            });
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<Dataset, StoreError> {
        let path = self.dir.join(DATASET);
        let f = File::open(&path).map_err(io_err(&path))?;
        parse_dataset(&self.manifest.dataset_name, std::io::BufReader::new(f))
            .map_err(|e| StoreError::Invalid(format!("stored dataset: {e}")))
    }

    fn append_line<T: Serialize>(&self, file: &str, value: &T) -> Result<(), StoreError> {
        if self.lock.is_none() {
            return Err(StoreError::ReadOnly(self.dir.clone()));
        }
        let path = self.dir.join(file);
        let mut line = serde_json::to_string(value).map_err(|e| StoreError::Invalid(e.to_string()))?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        f.write_all(line.as_bytes()).map_err(io_err(&path))?;
        f.sync_data().map_err(io_err(&path))?;
        Ok(())
    }

    pub fn log_event(&self, kind: &str, detail: Value) -> Result<u64, StoreError> {
        let mut c = self.counters.lock().unwrap();
        let seq = c.event_seq + 1;
        self.append_line(
            EVENTS,
            &RunEvent {
                seq,
                timestamp: Utc::now(),
                kind: kind.to_string(),
                detail,
            },
        )?;
        c.event_seq = seq;
        Ok(seq)
    }

    pub fn events(&self) -> Result<Vec<RunEvent>, StoreError> {
        read_jsonl(&self.dir.join(EVENTS))
    }

    pub fn audit_events(&self) -> Result<Vec<AuditEvent>, StoreError> {
        read_jsonl(&self.dir.join(AUDIT))
    }

    pub fn contexts(&self) -> Result<Vec<ContextSnapshot>, StoreError> {
        read_jsonl(&self.dir.join(CONTEXTS))
    }

    pub fn context(&self, round: u32) -> Result<Option<AnalysisContext>, StoreError> {
        Ok(self
            .contexts()?
            .into_iter()
            .find(|s| s.round == round)
            .map(|s| s.context))
    }

    pub fn latest_context(&self) -> Result<Option<ContextSnapshot>, StoreError> {
        Ok(self.contexts()?.pop())
    }

    /// Appends the context for the next round. Requirements and exemplars
    /// may only be added to, never changed.
    pub fn append_context(&self, context: &AnalysisContext) -> Result<u32, StoreError> {
        let last = self.latest_context()?;
        if let Some(prev) = &last {
            if !context.extends(&prev.context) {
                return Err(StoreError::Invalid(
                    "a new round may only append requirements and exemplars".into(),
                ));
            }
        }
        let round = last.map_or(1, |s| s.round + 1);
        self.append_line(
            CONTEXTS,
            &ContextSnapshot {
                round,
                context: context.clone(),
            },
        )?;
        self.log_event("context", serde_json::json!({"round": round}))?;
        Ok(round)
    }

    pub fn feedback(&self) -> Result<Vec<FeedbackRecord>, StoreError> {
        read_jsonl(&self.dir.join(FEEDBACK))
    }

    pub fn append_feedback(&self, record: &FeedbackRecord) -> Result<(), StoreError> {
        self.append_line(FEEDBACK, record)?;
        self.log_event("feedback", serde_json::json!({"round": record.round}))?;
        Ok(())
    }

    pub fn annotations(&self) -> Result<Vec<QualityAnnotation>, StoreError> {
        read_jsonl(&self.dir.join(ANNOTATIONS))
    }

    /// Appends verdicts; a verdict for an already annotated (data point,
    /// round) is rejected and nothing is written.
    pub fn append_annotations(&self, batch: &[QualityAnnotation]) -> Result<(), StoreError> {
        let mut seen: BTreeMap<(String, u32), ()> = self
            .annotations()?
            .into_iter()
            .map(|a| ((a.data_point_id, a.round), ()))
            .collect();
        for a in batch {
            if seen.insert((a.data_point_id.clone(), a.round), ()).is_some() {
                return Err(StoreError::Invalid(format!(
                    "data point {} is already annotated for round {}",
                    a.data_point_id, a.round
                )));
            }
        }
        for a in batch {
            self.append_line(ANNOTATIONS, a)?;
        }
        self.log_event("annotations", serde_json::json!({"count": batch.len()}))?;
        Ok(())
    }

    pub fn theme_records(&self) -> Result<Vec<ThemeRecord>, StoreError> {
        read_jsonl(&self.dir.join(THEMES))
    }

    pub fn append_themes(&self, record: &ThemeRecord) -> Result<(), StoreError> {
        self.append_line(THEMES, record)?;
        self.log_event(
            "themes",
            serde_json::json!({"status": record.status, "round": record.round, "count": record.themes.len()}),
        )?;
        Ok(())
    }

    /// The current theme set if its latest record is an approval.
    pub fn approved_themes(&self) -> Result<Option<ThemeRecord>, StoreError> {
        Ok(self
            .theme_records()?
            .pop()
            .filter(|r| r.status == ThemeStatus::Approved))
    }

    fn stage_path(&self, key: StageKey) -> PathBuf {
        self.dir.join(format!("{}.jsonl", key.file_stem()))
    }

    /// Committed progress of a stage; the latest plan line governs.
    pub fn stage_progress(&self, key: StageKey) -> Result<Option<StageProgress>, StoreError> {
        let path = self.stage_path(key);
        let mut progress: Option<StageProgress> = None;
        for (i, line) in read_jsonl::<StageLine>(&path)?.into_iter().enumerate() {
            match line {
                StageLine::Plan(plan) => {
                    progress = Some(StageProgress {
                        plan,
                        outputs: Vec::new(),
                    })
                }
                StageLine::Batch { index, output } => {
                    let p = progress.as_mut().ok_or_else(|| StoreError::Corrupt {
                        path: path.clone(),
                        line: i + 1,
                        message: "batch before plan".into(),
                    })?;
                    if index != p.outputs.len() {
                        return Err(StoreError::Corrupt {
                            path: path.clone(),
                            line: i + 1,
                            message: format!("batch {index} out of order"),
                        });
                    }
                    p.outputs.push(output);
                }
            }
        }
        Ok(progress)
    }

    /// First batch of the stage without a committed output.
    pub fn resume_point(&self, key: StageKey) -> Result<usize, StoreError> {
        Ok(self.stage_progress(key)?.map_or(0, |p| p.next_batch()))
    }

    /// Rounds that have a stage file for `stage`, ascending.
    pub fn stage_rounds(&self, stage: Stage) -> Result<Vec<u32>, StoreError> {
        let prefix = format!("{stage}-r");
        let mut rounds = Vec::new();
        for entry in fs::read_dir(&self.dir).map_err(io_err(&self.dir))? {
            let name = entry.map_err(io_err(&self.dir))?.file_name();
            let name = name.to_string_lossy();
            if let Some(r) = name
                .strip_prefix(&prefix)
                .and_then(|r| r.strip_suffix(".jsonl"))
                .and_then(|r| r.parse().ok())
            {
                rounds.push(r);
            }
        }
        rounds.sort_unstable();
        Ok(rounds)
    }

    /// Latest round of `stage` whose batches are all committed.
    pub fn latest_complete(&self, stage: Stage) -> Result<Option<(u32, StageProgress)>, StoreError> {
        for round in self.stage_rounds(stage)?.into_iter().rev() {
            if let Some(p) = self.stage_progress(StageKey::new(stage, round))? {
                if p.is_complete() {
                    return Ok(Some((round, p)));
                }
            }
        }
        Ok(None)
    }
}

fn run_id_of(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

impl From<StoreError> for CheckpointError {
    fn from(e: StoreError) -> Self {
        CheckpointError(e.to_string())
    }
}

impl Checkpoint for RunStore {
    fn load(&self, key: StageKey) -> Result<Option<StageProgress>, CheckpointError> {
        Ok(self.stage_progress(key)?)
    }

    fn begin(&self, key: StageKey, plan: &StagePlan) -> Result<(), CheckpointError> {
        if self.stage_progress(key)?.is_some_and(|p| &p.plan == plan) {
            return Ok(());
        }
        self.append_line(&format!("{}.jsonl", key.file_stem()), &StageLine::Plan(plan.clone()))?;
        self.log_event(
            "stage_started",
            serde_json::json!({"stage": key.stage, "round": key.round, "batches": plan.batches.len()}),
        )?;
        Ok(())
    }

    fn commit(&self, key: StageKey, batch: usize, output: &Value) -> Result<(), CheckpointError> {
        let next = self.resume_point(key)?;
        if batch != next {
            return Err(CheckpointError(format!(
                "{key}: batch {batch} committed out of order (next is {next})"
            )));
        }
        self.append_line(
            &format!("{}.jsonl", key.file_stem()),
            &StageLine::Batch {
                index: batch,
                output: output.clone(),
            },
        )?;
        Ok(())
    }
}

impl AuditSink for RunStore {
    fn record(&self, record: AuditRecord) -> Result<u64, AuditError> {
        let mut c = self.counters.lock().unwrap();
        let seq = c.audit_seq + 1;
        self.append_line(
            AUDIT,
            &AuditEvent {
                seq,
                timestamp: Utc::now(),
                record,
            },
        )
        .map_err(|e| AuditError(e.to_string()))?;
        c.audit_seq = seq;
        Ok(seq)
    }
}
