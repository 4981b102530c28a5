use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use thematic_core::evaluation::Flow;
use thematic_core::pipeline::StageKey;
use thematic_core::store::{ContextSnapshot, FeedbackRecord, ThemeRecord};
use thematic_core::{
    theme_mapping, AnalysisContext, DataPoint, Dataset, Feedback, MappingMatrix, QualityAnnotation,
    Review, Run, RunSettings, RunStore, RunView, Stage, ThemeAssignment, ThemeSet,
};

use crate::error::ApiError;
use crate::extract::{Body, Params, Required};
use crate::jobs::{ActiveStage, JobState, RunSlot};
use crate::{valid_run_id, AppState};

const DEFAULT_PAGE: usize = 100;
const MAX_PAGE: usize = 1000;

pub(crate) fn router() -> Router<AppState> {
    Router::new()
        .route("/api/runs", get(list_runs).post(create_run))
        .route("/api/runs/{id}", get(run_detail))
        .route("/api/runs/{id}/codes", get(codes))
        .route("/api/runs/{id}/feedback", post(feedback))
        .route("/api/runs/{id}/annotations", get(annotations).post(annotate))
        .route("/api/runs/{id}/themes", get(themes))
        .route("/api/runs/{id}/themes/approve", post(approve))
        .route("/api/runs/{id}/stages/{stage}", post(start_stage))
        .route("/api/runs/{id}/progress", get(progress))
        .route("/api/runs/{id}/assignments", get(assignments))
        .route("/api/runs/{id}/evaluation", get(evaluation))
        .route("/api/runs/{id}/mapping", get(mapping))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .method_not_allowed_fallback(|| async {
            ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "METHOD_NOT_ALLOWED", "method not allowed here")
        })
}

/// Runs blocking store access off the async workers.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn reader(state: &AppState, id: &str) -> Result<RunStore, ApiError> {
    Ok(RunStore::open_read(&state.run_dir(id)?)?)
}

fn writer(state: &AppState, id: &str) -> Result<(Arc<RunSlot>, Arc<RunStore>), ApiError> {
    let dir = state.run_dir(id)?;
    let slot = state.slot(id);
    let store = slot.writer(&dir)?;
    Ok((slot, store))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub dataset_name: String,
    pub points: usize,
    pub created_at: DateTime<Utc>,
    pub current_round: u32,
}

impl RunSummary {
    fn of(store: &RunStore) -> Result<Self, ApiError> {
        let m = store.manifest();
        Ok(Self {
            run_id: m.run_id.clone(),
            dataset_name: m.dataset_name.clone(),
            points: store.dataset()?.len(),
            created_at: m.created_at,
            current_round: RunView::new(store).current_round()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: Stage,
    pub round: u32,
    /// Committed batches.
    pub done: usize,
    pub total: usize,
    pub complete: bool,
}

fn stage_statuses(store: &RunStore) -> Result<Vec<StageStatus>, ApiError> {
    let mut out = Vec::new();
    for stage in Stage::ALL {
        for round in store.stage_rounds(stage)? {
            if let Some(p) = store.stage_progress(StageKey::new(stage, round))? {
                out.push(StageStatus {
                    stage,
                    round,
                    done: p.outputs.len(),
                    total: p.plan.batches.len(),
                    complete: p.is_complete(),
                });
            }
        }
    }
    Ok(out)
}

async fn list_runs(State(state): State<AppState>) -> Result<Json<Vec<RunSummary>>, ApiError> {
    blocking(move || {
        let mut out = Vec::new();
        let entries = match std::fs::read_dir(state.root()) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Json(out)),
            Err(e) => return Err(ApiError::internal(e.to_string())),
        };
        let mut ids: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|id| valid_run_id(id))
            .collect();
        ids.sort();
        for id in ids {
            let Ok(dir) = state.run_dir(&id) else { continue };
            match RunStore::open_read(&dir) {
                Ok(store) => out.push(RunSummary::of(&store)?),
                Err(e) => tracing::warn!(run = %id, error = %e, "skipping unreadable run"),
            }
        }
        Ok(Json(out))
    })
    .await
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateRun {
    pub run_id: String,
    #[serde(default)]
    pub dataset_name: Option<String>,
    pub points: Vec<DataPoint>,
    pub context: AnalysisContext,
    #[serde(default)]
    pub settings: Option<RunSettings>,
}

async fn create_run(
    State(state): State<AppState>,
    Required(req): Required<CreateRun>,
) -> Result<(StatusCode, Json<RunSummary>), ApiError> {
    if !valid_run_id(&req.run_id) {
        return Err(ApiError::invalid(format!("invalid run id {:?}", req.run_id)));
    }
    blocking(move || {
        let name = req.dataset_name.clone().unwrap_or_else(|| req.run_id.clone());
        let dataset = Dataset::new(&name, req.points).map_err(|e| ApiError::invalid(e.to_string()))?;
        std::fs::create_dir_all(state.root()).map_err(|e| ApiError::internal(e.to_string()))?;
        let dir = state.root().join(&req.run_id);
        let store = Run::ingest(&dir, &dataset, &req.context, req.settings.unwrap_or_default())?;
        let summary = RunSummary::of(&store)?;
        state.slot(&req.run_id).adopt(Arc::new(store));
        Ok((StatusCode::CREATED, Json(summary)))
    })
    .await
}

#[derive(Debug, Clone, Serialize)]
struct RunDetail {
    #[serde(flatten)]
    summary: RunSummary,
    dataset_digest: String,
    settings: RunSettings,
    contexts: Vec<ContextSnapshot>,
    feedback: Vec<FeedbackRecord>,
    stages: Vec<StageStatus>,
    themes: Option<ThemeRecord>,
    approved: Option<ThemeRecord>,
    job: JobState,
}

async fn run_detail(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<RunDetail>, ApiError> {
    blocking(move || {
        let store = reader(&state, &id)?;
        let m = store.manifest();
        Ok(Json(RunDetail {
            summary: RunSummary::of(&store)?,
            dataset_digest: m.dataset_digest.clone(),
            settings: m.settings.clone(),
            contexts: store.contexts()?,
            feedback: store.feedback()?,
            stages: stage_statuses(&store)?,
            themes: store.theme_records()?.pop(),
            approved: store.approved_themes()?,
            job: state.slot(&id).job(),
        }))
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
struct PageQuery {
    round: Option<u32>,
    offset: Option<usize>,
    limit: Option<usize>,
}

impl PageQuery {
    fn window(&self) -> Result<(usize, usize), ApiError> {
        let limit = self.limit.unwrap_or(DEFAULT_PAGE);
        if limit == 0 || limit > MAX_PAGE {
            return Err(ApiError::invalid(format!("limit must be between 1 and {MAX_PAGE}")));
        }
        Ok((self.offset.unwrap_or(0), limit))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeItem {
    pub id: String,
    pub code: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodePage {
    pub round: u32,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub items: Vec<CodeItem>,
}

async fn codes(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Params(q): Params<PageQuery>,
) -> Result<Json<CodePage>, ApiError> {
    let (offset, limit) = q.window()?;
    blocking(move || {
        let store = reader(&state, &id)?;
        let view = RunView::new(&store);
        let round = match q.round {
            Some(r) => r,
            None => match store.stage_rounds(Stage::Coding)?.last() {
                Some(r) => *r,
                None => view.current_round()?,
            },
        };
        let ds = store.dataset()?;
        let codes = view.codes(round)?;
        let items = codes
            .iter()
            .skip(offset)
            .take(limit)
            .map(|c| CodeItem {
                id: c.data_point_id.clone(),
                code: c.code_text.clone(),
                text: ds.get(&c.data_point_id).map(|p| p.text.clone()).unwrap_or_default(),
            })
            .collect();
        Ok(Json(CodePage {
            round,
            total: codes.len(),
            offset,
            limit,
            items,
        }))
    })
    .await
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FeedbackRequest {
    #[serde(flatten)]
    pub feedback: Feedback,
    /// Start coding the new round right away.
    #[serde(default)]
    pub rerun: bool,
}

#[derive(Debug, Serialize)]
struct FeedbackReply {
    round: u32,
    context: AnalysisContext,
    #[serde(skip_serializing_if = "Option::is_none")]
    job: Option<ActiveStage>,
}

async fn feedback(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Required(req): Required<FeedbackRequest>,
) -> Result<(StatusCode, Json<FeedbackReply>), ApiError> {
    let rerun = req.rerun;
    let (slot, store, round, context) = {
        let state = state.clone();
        blocking(move || {
            let (slot, store) = writer(&state, &id)?;
            slot.ensure_idle()?;
            let round = Review::new(&store).feedback(&req.feedback)?;
            let context = store
                .context(round)?
                .ok_or_else(|| ApiError::internal("new round has no context"))?;
            Ok((slot, store, round, context))
        })
        .await?
    };
    if !rerun {
        return Ok((StatusCode::CREATED, Json(FeedbackReply { round, context, job: None })));
    }
    let backend = backend(&state)?;
    let job = slot.start(Stage::Coding, store, backend, state.config.retry.clone(), move |run| {
        run.code(Some(round), None).map(drop)
    })?;
    Ok((StatusCode::ACCEPTED, Json(FeedbackReply { round, context, job: Some(job) })))
}

#[derive(Debug, Default, Deserialize)]
struct RoundQuery {
    round: Option<u32>,
}

async fn annotations(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Params(q): Params<RoundQuery>,
) -> Result<Json<Vec<QualityAnnotation>>, ApiError> {
    blocking(move || {
        let store = reader(&state, &id)?;
        let mut all = store.annotations()?;
        if let Some(r) = q.round {
            all.retain(|a| a.round == r);
        }
        Ok(Json(all))
    })
    .await
}

#[derive(Debug, Serialize)]
struct Stored {
    stored: usize,
}

async fn annotate(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Required(batch): Required<Vec<QualityAnnotation>>,
) -> Result<(StatusCode, Json<Stored>), ApiError> {
    if batch.is_empty() {
        return Err(ApiError::invalid("no annotations given"));
    }
    blocking(move || {
        let (_, store) = writer(&state, &id)?;
        let stored = Review::new(&store).annotate(&batch)?;
        Ok((StatusCode::CREATED, Json(Stored { stored })))
    })
    .await
}

#[derive(Debug, Serialize)]
struct ThemesReply {
    latest: Option<ThemeRecord>,
    approved: Option<ThemeRecord>,
}

async fn themes(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<ThemesReply>, ApiError> {
    blocking(move || {
        let store = reader(&state, &id)?;
        Ok(Json(ThemesReply {
            latest: store.theme_records()?.pop(),
            approved: store.approved_themes()?,
        }))
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
struct ApproveRequest {
    themes: Option<ThemeSet>,
}

async fn approve(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Body(req): Body<ApproveRequest>,
) -> Result<Json<ThemeRecord>, ApiError> {
    blocking(move || {
        let (slot, store) = writer(&state, &id)?;
        slot.ensure_idle()?;
        Ok(Json(Review::new(&store).approve_themes(req.themes)?))
    })
    .await
}

/// Options for a stage job. Unset fields fall back to the run's settings.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRequest {
    pub round: Option<u32>,
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub parallelism: Option<usize>,
    #[serde(default)]
    pub allow_unapproved: bool,
}

#[derive(Debug, Serialize)]
struct StageReply {
    job: ActiveStage,
}

fn backend(state: &AppState) -> Result<Arc<dyn thematic_core::ChatBackend>, ApiError> {
    (state.config.backend)()
        .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "BACKEND_UNAVAILABLE", e))
}

/// Rejects a stage whose inputs are missing before any job starts.
fn precheck(store: &RunStore, stage: Stage, req: &StageRequest) -> Result<(), ApiError> {
    let missing = |what: &str| ApiError::conflict("INVALID_STATE", what.to_string());
    match stage {
        Stage::Coding => {
            if let Some(r) = req.round {
                store
                    .context(r)?
                    .ok_or_else(|| missing(&format!("round {r} has no analysis context")))?;
            }
        }
        Stage::Collation => {
            if store.latest_complete(Stage::Coding)?.is_none() {
                return Err(missing("no completed coding round to collate"));
            }
        }
        Stage::Merge => {
            if store.latest_complete(Stage::Collation)?.is_none() {
                return Err(missing("no completed collation to merge"));
            }
        }
        Stage::Classification => {
            if let Some(k) = req.k {
                if k == 0 {
                    return Err(ApiError::invalid("k must be at least 1"));
                }
            }
            if store.approved_themes()?.is_none() {
                if !req.allow_unapproved {
                    return Err(ApiError::conflict(
                        "THEMES_UNAPPROVED",
                        "approve a theme set before classification",
                    ));
                }
                if store.theme_records()?.is_empty() {
                    return Err(missing("no theme set to classify against"));
                }
            }
        }
    }
    Ok(())
}

async fn start_stage(
    State(state): State<AppState>,
    Path((id, stage)): Path<(String, String)>,
    Body(req): Body<StageRequest>,
) -> Result<(StatusCode, Json<StageReply>), ApiError> {
    let stage: Stage = stage.parse().map_err(|e: String| ApiError::new(StatusCode::NOT_FOUND, "UNKNOWN_STAGE", e))?;
    let (slot, store) = {
        let state = state.clone();
        let req = req.clone();
        blocking(move || {
            let (slot, store) = writer(&state, &id)?;
            slot.ensure_idle()?;
            precheck(&store, stage, &req)?;
            Ok((slot, store))
        })
        .await?
    };
    let backend = backend(&state)?;
    let retry = state.config.retry.clone();
    let job = slot.start(stage, store, backend, retry, move |run| match stage {
        Stage::Coding => run.code(req.round, req.seed).map(drop),
        Stage::Collation => run.collate(req.round).map(drop),
        Stage::Merge => run.merge(req.round).map(drop),
        Stage::Classification => run.classify(req.k, req.parallelism, req.allow_unapproved).map(drop),
    })?;
    Ok((StatusCode::ACCEPTED, Json(StageReply { job })))
}

#[derive(Debug, Default, Deserialize)]
struct ProgressQuery {
    /// Last cursor seen. The reply waits until the state moves past it.
    cursor: Option<u64>,
    wait_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressReply {
    pub cursor: u64,
    pub job: JobState,
    pub stages: Vec<StageStatus>,
}

async fn progress(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Params(q): Params<ProgressQuery>,
) -> Result<Json<ProgressReply>, ApiError> {
    state.run_dir(&id)?;
    let slot = state.slot(&id);
    let mut rx = slot.subscribe();
    if let Some(seen) = q.cursor {
        let wait = Duration::from_millis(q.wait_ms.unwrap_or(u64::MAX)).min(state.config.max_wait);
        // A timeout just means nothing changed; the reply says so.
        let _ = tokio::time::timeout(wait, rx.wait_for(|v| *v != seen)).await;
    }
    let cursor = *rx.borrow();
    blocking(move || {
        let store = reader(&state, &id)?;
        Ok(Json(ProgressReply {
            cursor,
            job: slot.job(),
            stages: stage_statuses(&store)?,
        }))
    })
    .await
}

#[derive(Debug, Serialize)]
struct AssignmentPage {
    total: usize,
    offset: usize,
    limit: usize,
    items: Vec<ThemeAssignment>,
}

async fn assignments(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Params(q): Params<PageQuery>,
) -> Result<Json<AssignmentPage>, ApiError> {
    let (offset, limit) = q.window()?;
    blocking(move || {
        let store = reader(&state, &id)?;
        let all = RunView::new(&store)
            .assignments()?
            .ok_or_else(|| ApiError::conflict("INVALID_STATE", "no completed classification"))?;
        Ok(Json(AssignmentPage {
            total: all.len(),
            offset,
            limit,
            items: all.into_iter().skip(offset).take(limit).collect(),
        }))
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
struct EvalQuery {
    k: Option<usize>,
}

async fn evaluation(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Params(q): Params<EvalQuery>,
) -> Result<Response, ApiError> {
    blocking(move || {
        let store = reader(&state, &id)?;
        let k = q.k.unwrap_or(store.manifest().settings.k);
        if k == 0 {
            return Err(ApiError::invalid("k must be at least 1"));
        }
        Ok(Json(RunView::new(&store).evaluate(k)?).into_response())
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
struct MappingQuery {
    format: Option<String>,
}

#[derive(Debug, Serialize)]
struct MappingReply {
    matrix: MappingMatrix,
    flows: Vec<Flow>,
}

async fn mapping(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Params(q): Params<MappingQuery>,
) -> Result<Response, ApiError> {
    let csv = match q.format.as_deref() {
        None | Some("json") => false,
        Some("csv") => true,
        Some(other) => return Err(ApiError::invalid(format!("unknown format {other:?}"))),
    };
    blocking(move || {
        let store = reader(&state, &id)?;
        let unavailable = |m: &str| ApiError::conflict("EVALUATION_UNAVAILABLE", m.to_string());
        let assignments = RunView::new(&store)
            .assignments()?
            .ok_or_else(|| unavailable("no completed classification"))?;
        let gold: BTreeMap<String, String> = store.dataset()?.gold();
        if gold.is_empty() {
            return Err(unavailable("the dataset has no gold themes"));
        }
        let matrix = theme_mapping(&assignments, &gold)
            .map_err(|e| ApiError::conflict("EVALUATION_UNAVAILABLE", e.to_string()))?;
        if csv {
            return Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], matrix.flows_csv()).into_response());
        }
        let flows = matrix.flows();
        Ok(Json(MappingReply { matrix, flows }).into_response())
    })
    .await
}
