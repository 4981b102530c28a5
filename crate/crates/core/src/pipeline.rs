//! Stage orchestration: initial coding, feedback, collation, theme merge and
//! classification.
//!
//! Every stage packs its inputs into batches, writes the batch plan to a
//! [`Checkpoint`], and commits one record per finished batch. A stage that
//! finds committed batches for the same inputs continues from the first
//! missing batch, so an interrupted stage resumes with identical results.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{
    label_key, validate_theme_set, AnalysisContext, Dataset, GenerationParams, HighLevelTheme,
    InitialCode, PotentialTheme, Stage, ThemeAssignment, ThemeSet,
};
use crate::gateway::{corrective_message, CallTag, Field, Gateway, GatewayError, Schema};
use crate::prompt::{most_frequent, Prompt, PromptBuilder, PromptError};
use crate::tokens::{pack_items, Batch};

/// Identifies the output of one stage in one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StageKey {
    pub stage: Stage,
    pub round: u32,
}

impl StageKey {
    pub fn new(stage: Stage, round: u32) -> Self {
        Self { stage, round }
    }

    /// File stem used by the run store, e.g. `coding-r2`.
    pub fn file_stem(&self) -> String {
        format!("{}-r{}", self.stage, self.round)
    }
}

impl fmt::Display for StageKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} round {}", self.stage, self.round)
    }
}

/// Batch membership of a stage, fixed before the first call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    /// Digest of everything the stage output depends on.
    pub inputs_digest: String,
    pub batches: Vec<Vec<String>>,
}

/// Committed state of a stage: its plan and the outputs of batches
/// `0..outputs.len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageProgress {
    pub plan: StagePlan,
    pub outputs: Vec<Value>,
}

impl StageProgress {
    pub fn next_batch(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_complete(&self) -> bool {
        self.outputs.len() == self.plan.batches.len()
    }
}

/// Typed views of committed batch outputs, in batch order.
impl StageProgress {
    fn rows<T: DeserializeOwned>(&self) -> Result<Vec<T>, CheckpointError> {
        let mut out = Vec::new();
        for (i, v) in self.outputs.iter().enumerate() {
            let rows: Vec<T> = serde_json::from_value(v.clone())
                .map_err(|e| CheckpointError(format!("batch {i}: unreadable output: {e}")))?;
            out.extend(rows);
        }
        Ok(out)
    }

    pub fn initial_codes(&self, round: u32) -> Result<Vec<InitialCode>, CheckpointError> {
        Ok(self
            .rows::<CodeRow>()?
            .into_iter()
            .map(|r| InitialCode {
                data_point_id: r.id,
                code_text: r.code,
                round,
            })
            .collect())
    }

    pub fn collation(&self) -> Result<Collation, CheckpointError> {
        let mut labels = LabelRegistry::default();
        for r in self.rows::<ThemeRow>()? {
            labels.assign(r.id, &r.theme);
        }
        Ok(labels.into_collation())
    }

    pub fn theme_set(&self) -> Result<Option<ThemeSet>, CheckpointError> {
        self.outputs
            .first()
            .map(|v| {
                serde_json::from_value(v.clone())
                    .map_err(|e| CheckpointError(format!("unreadable theme set: {e}")))
            })
            .transpose()
    }

    pub fn assignments(&self) -> Result<Vec<ThemeAssignment>, CheckpointError> {
        Ok(self
            .rows::<RankRow>()?
            .into_iter()
            .map(|r| ThemeAssignment {
                data_point_id: r.id,
                ranked_themes: r.themes,
            })
            .collect())
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{0}")]
pub struct CheckpointError(pub String);

/// Durable record of stage progress.
pub trait Checkpoint: Send + Sync {
    fn load(&self, key: StageKey) -> Result<Option<StageProgress>, CheckpointError>;
    /// Starts a stage with `plan`. A different earlier plan for the same key,
    /// and its committed batches, are superseded.
    fn begin(&self, key: StageKey, plan: &StagePlan) -> Result<(), CheckpointError>;
    /// Commits the output of batch `batch`, which must be the next missing one.
    fn commit(&self, key: StageKey, batch: usize, output: &Value) -> Result<(), CheckpointError>;
}

/// Non-durable [`Checkpoint`].
#[derive(Debug, Default)]
pub struct MemoryCheckpoint {
    stages: Mutex<BTreeMap<StageKey, StageProgress>>,
}

impl MemoryCheckpoint {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Checkpoint for MemoryCheckpoint {
    fn load(&self, key: StageKey) -> Result<Option<StageProgress>, CheckpointError> {
        Ok(self.stages.lock().unwrap().get(&key).cloned())
    }

    fn begin(&self, key: StageKey, plan: &StagePlan) -> Result<(), CheckpointError> {
        let mut stages = self.stages.lock().unwrap();
        match stages.get(&key) {
            Some(p) if &p.plan == plan => {}
            _ => {
                stages.insert(
                    key,
                    StageProgress {
                        plan: plan.clone(),
                        outputs: Vec::new(),
                    },
                );
            }
        }
        Ok(())
    }

    fn commit(&self, key: StageKey, batch: usize, output: &Value) -> Result<(), CheckpointError> {
        let mut stages = self.stages.lock().unwrap();
        let p = stages
            .get_mut(&key)
            .ok_or_else(|| CheckpointError(format!("{key} was not started")))?;
        if batch != p.outputs.len() || batch >= p.plan.batches.len() {
            return Err(CheckpointError(format!(
                "{key}: batch {batch} committed out of order (next is {})",
                p.outputs.len()
            )));
        }
        p.outputs.push(output.clone());
        Ok(())
    }
}

/// Batch-level progress of a running stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: Stage,
    pub round: u32,
    pub done: usize,
    pub total: usize,
}

pub type ProgressFn = dyn Fn(Progress) + Send + Sync;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{tag}: {source}")]
    Prompt {
        tag: CallTag,
        #[source]
        source: PromptError,
    },
    #[error("{tag}: invalid model output: {}", problems.join("; "))]
    InvalidOutput { tag: CallTag, problems: Vec<String> },
    #[error("{0}")]
    Precondition(String),
    #[error("checkpoint failed: {0}")]
    Checkpoint(#[from] CheckpointError),
}

impl PipelineError {
    /// Stage, round and batch the failure belongs to, when known.
    pub fn locus(&self) -> Option<CallTag> {
        match self {
            PipelineError::Gateway(e) => e.tag().cloned(),
            PipelineError::Prompt { tag, .. } | PipelineError::InvalidOutput { tag, .. } => {
                Some(tag.clone())
            }
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("feedback has no positive, negative or exemplar items")]
pub struct EmptyFeedback;

/// Expert feedback on one round of initial codes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    /// Aspects the codes should capture.
    #[serde(default)]
    pub positive: Vec<String>,
    /// Aspects the codes should leave out.
    #[serde(default)]
    pub negative: Vec<String>,
    /// Example codes of the desired kind.
    #[serde(default)]
    pub exemplars: Vec<String>,
}

impl Feedback {
    fn cleaned(items: &[String]) -> impl Iterator<Item = &str> {
        items.iter().map(|s| s.trim()).filter(|s| !s.is_empty())
    }

    pub fn is_empty(&self) -> bool {
        Self::cleaned(&self.positive).next().is_none()
            && Self::cleaned(&self.negative).next().is_none()
            && Self::cleaned(&self.exemplars).next().is_none()
    }
}

/// Returns `ctx` with the feedback appended: positive items as `focus on: …`
/// and negative items as `do not encode: …` requirements, exemplars as
/// positive exemplars. Blank items are ignored.
pub fn apply_feedback(ctx: &AnalysisContext, feedback: &Feedback) -> Result<AnalysisContext, EmptyFeedback> {
    if feedback.is_empty() {
        return Err(EmptyFeedback);
    }
    let mut next = ctx.clone();
    next.custom_requirements
        .extend(Feedback::cleaned(&feedback.positive).map(|p| format!("focus on: {p}")));
    next.custom_requirements
        .extend(Feedback::cleaned(&feedback.negative).map(|n| format!("do not encode: {n}")));
    next.positive_exemplars
        .extend(Feedback::cleaned(&feedback.exemplars).map(str::to_string));
    Ok(next)
}

/// Draws `min(size, codes.len())` codes without replacement. The generator
/// is seeded from `seed` and keyed by round and batch, so every batch gets
/// the same sample on every run. The sample keeps the order of `codes`.
pub fn interim_sample(
    codes: &[InitialCode],
    size: usize,
    seed: u64,
    round: u32,
    batch: usize,
) -> Vec<InitialCode> {
    let n = size.min(codes.len());
    if n == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((u64::from(round) << 32) | batch as u64);
    let mut picked = rand::seq::index::sample(&mut rng, codes.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| codes[i].clone()).collect()
}

/// Result of collating initial codes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Collation {
    /// Candidate theme of every data point.
    pub candidate_of: BTreeMap<String, String>,
    /// Candidate themes, most members first, ties by label.
    pub themes: Vec<PotentialTheme>,
}

impl Collation {
    /// `(label, member count)` in the order of [`Collation::themes`].
    pub fn frequencies(&self) -> Vec<(String, usize)> {
        self.themes
            .iter()
            .map(|t| (t.label.clone(), t.member_ids.len()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CodeRow {
    id: String,
    code: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ThemeRow {
    id: String,
    theme: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct RankRow {
    id: String,
    themes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct MergeRow {
    theme: String,
    sub_themes: Vec<String>,
}

fn digest_of(value: &Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

fn row_schema(field: &str, value: Schema) -> Schema {
    Schema::array_of(Schema::object(vec![
        Field::required("id", Schema::NonEmptyString),
        Field::required(field, value),
    ]))
}

fn decode<T: DeserializeOwned>(key: StageKey, v: &Value) -> Result<T, PipelineError> {
    serde_json::from_value(v.clone())
        .map_err(|e| CheckpointError(format!("{key}: unreadable committed batch: {e}")).into())
}

fn encode<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("stage rows serialize")
}

/// Runs the stages against one gateway, prompt builder and checkpoint.
#[derive(Clone)]
pub struct Pipeline {
    gateway: Gateway,
    prompts: PromptBuilder,
    checkpoint: Arc<dyn Checkpoint>,
    progress: Option<Arc<ProgressFn>>,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline")
            .field("gateway", &self.gateway)
            .finish_non_exhaustive()
    }
}

impl Pipeline {
    pub fn new(gateway: Gateway, prompts: PromptBuilder) -> Self {
        Self {
            gateway,
            prompts,
            checkpoint: Arc::new(MemoryCheckpoint::new()),
            progress: None,
        }
    }

    pub fn with_checkpoint(mut self, checkpoint: Arc<dyn Checkpoint>) -> Self {
        self.checkpoint = checkpoint;
        self
    }

    pub fn with_progress(mut self, progress: Arc<ProgressFn>) -> Self {
        self.progress = Some(progress);
        self
    }

    pub fn prompts(&self) -> &PromptBuilder {
        &self.prompts
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    fn report(&self, key: StageKey, done: usize, total: usize) {
        if let Some(p) = &self.progress {
            p(Progress {
                stage: key.stage,
                round: key.round,
                done,
                total,
            });
        }
    }

    /// Registers the plan and returns the outputs already committed for it.
    fn start(&self, key: StageKey, plan: &StagePlan) -> Result<Vec<Value>, PipelineError> {
        let done = match self.checkpoint.load(key)? {
            Some(p) if p.plan == *plan => p.outputs,
            Some(p) => {
                if !p.outputs.is_empty() {
                    tracing::info!(%key, "inputs changed; earlier batches are superseded");
                }
                Vec::new()
            }
            None => Vec::new(),
        };
        if done.is_empty() {
            self.checkpoint.begin(key, plan)?;
        }
        self.report(key, done.len(), plan.batches.len());
        Ok(done)
    }

    fn commit(&self, key: StageKey, batch: usize, total: usize, output: &Value) -> Result<(), PipelineError> {
        self.checkpoint.commit(key, batch, output)?;
        self.report(key, batch + 1, total);
        Ok(())
    }

    fn params(&self, stage: Stage) -> &GenerationParams {
        self.prompts.params(stage)
    }

    /// Sends one batch prompt and returns one converted value per batch id,
    /// in batch order. Missing, unknown or duplicated ids and rows rejected
    /// by `convert` get one corrective re-prompt.
    fn batch_rows<T>(
        &self,
        tag: &CallTag,
        prompt: Prompt,
        ids: &[String],
        schema: &Schema,
        convert: impl Fn(&Value) -> Result<T, String>,
    ) -> Result<Vec<(String, T)>, PipelineError> {
        let params = self.params(tag.stage).clone();
        let original = prompt.into_request(&params);
        let mut request = original.clone();
        for attempt in 0..2 {
            let resp = self.gateway.complete_structured(&request, tag, schema)?;
            let rows = resp.value.as_array().cloned().unwrap_or_default();
            let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
            let mut got: HashMap<String, T> = HashMap::new();
            let mut problems = Vec::new();
            let mut unknown = Vec::new();
            let mut repeated = Vec::new();
            let mut rejected = BTreeSet::new();
            for row in &rows {
                let id = row["id"].as_str().unwrap_or_default().to_string();
                if !wanted.contains(id.as_str()) {
                    unknown.push(id);
                    continue;
                }
                if got.contains_key(&id) {
                    repeated.push(id);
                    continue;
                }
                match convert(row) {
                    Ok(v) => {
                        got.insert(id, v);
                    }
                    Err(e) => {
                        problems.push(format!("id {id}: {e}"));
                        rejected.insert(id);
                    }
                }
            }
            let missing: Vec<&str> = ids
                .iter()
                .filter(|id| !got.contains_key(*id) && !rejected.contains(*id))
                .map(String::as_str)
                .collect();
            if !missing.is_empty() {
                problems.push(format!("missing ids: {}", missing.join(", ")));
            }
            if !unknown.is_empty() {
                problems.push(format!("ids not in the batch: {}", unknown.join(", ")));
            }
            if !repeated.is_empty() {
                problems.push(format!("ids answered more than once: {}", repeated.join(", ")));
            }
            if problems.is_empty() {
                return Ok(ids
                    .iter()
                    .map(|id| {
                        let v = got.remove(id).expect("coverage checked");
                        (id.clone(), v)
                    })
                    .collect());
            }
            if attempt == 1 {
                return Err(PipelineError::InvalidOutput {
                    tag: tag.clone(),
                    problems,
                });
            }
            tracing::warn!(%tag, ?problems, "re-prompting after invalid batch output");
            request.user_message = format!(
                "{}\n\n{}",
                original.user_message,
                corrective_message(&problems.join("; "))
            );
        }
        unreachable!("loop returns on its second pass")
    }

    /// Generates one initial code per data point for `round`. Batches run in
    /// packed order; each batch sees a sample of the codes already produced
    /// in this round.
    pub fn run_initial_coding(
        &self,
        ds: &Dataset,
        ctx: &AnalysisContext,
        round: u32,
        seed: u64,
    ) -> Result<Vec<InitialCode>, PipelineError> {
        if round == 0 {
            return Err(PipelineError::Precondition("rounds start at 1".into()));
        }
        ctx.validate()
            .map_err(|e| PipelineError::Precondition(e.to_string()))?;
        let key = StageKey::new(Stage::Coding, round);
        let tag0 = CallTag::new(Stage::Coding, round, 0);
        let prompt_err = |tag: &CallTag| {
            let tag = tag.clone();
            move |source| PipelineError::Prompt { tag, source }
        };
        let budget = self
            .prompts
            .coding_budget(ctx, ds.ids())
            .map_err(prompt_err(&tag0))?;
        let batches = pack_items(
            ds.points().iter().map(|p| (p.id.clone(), p.text.clone())),
            &budget,
            self.prompts.counter().as_ref(),
        )
        .map_err(|e| prompt_err(&tag0)(e.into()))?;
        let plan = StagePlan {
            inputs_digest: digest_of(&serde_json::json!({
                "dataset": ds.to_jsonl(),
                "context": ctx,
                "seed": seed,
                "params": self.params(Stage::Coding),
                "limits": self.prompts.limits(),
            })),
            batches: batches.iter().map(Batch::ids).collect(),
        };
        let done = self.start(key, &plan)?;

        let mut codes: Vec<InitialCode> = Vec::with_capacity(ds.len());
        for v in &done {
            let rows: Vec<CodeRow> = decode(key, v)?;
            codes.extend(rows.into_iter().map(|r| InitialCode {
                data_point_id: r.id,
                code_text: r.code,
                round,
            }));
        }
        let schema = row_schema("code", Schema::NonEmptyString);
        let sample_size = self.prompts.limits().interim_sample_size;
        for batch in &batches[done.len()..] {
            let tag = CallTag::new(Stage::Coding, round, batch.index);
            let interim = interim_sample(&codes, sample_size, seed, round, batch.index);
            let prompt = self
                .prompts
                .build_coding(batch, ctx, &interim)
                .map_err(prompt_err(&tag))?;
            let rows = self.batch_rows(&tag, prompt, &batch.ids(), &schema, |row| {
                Ok(row["code"].as_str().unwrap_or_default().trim().to_string())
            })?;
            let rows: Vec<CodeRow> = rows
                .into_iter()
                .map(|(id, code)| CodeRow { id, code })
                .collect();
            self.commit(key, batch.index, batches.len(), &encode(&rows))?;
            codes.extend(rows.into_iter().map(|r| InitialCode {
                data_point_id: r.id,
                code_text: r.code,
                round,
            }));
        }

        let order: HashMap<&str, usize> = ds.ids().enumerate().map(|(i, id)| (id, i)).collect();
        codes.sort_by_key(|c| order[c.data_point_id.as_str()]);
        Ok(codes)
    }

    /// Maps every initial code to a candidate theme. Each batch sees the
    /// most frequent candidate themes so far. Labels that differ only in
    /// case, spacing or Unicode form are merged under their first spelling.
    pub fn run_code_collation(
        &self,
        codes: &[InitialCode],
        ctx: &AnalysisContext,
        round: u32,
    ) -> Result<Collation, PipelineError> {
        if codes.is_empty() {
            return Err(PipelineError::Precondition("no initial codes to collate".into()));
        }
        let mut seen = BTreeSet::new();
        for c in codes {
            if !seen.insert(c.data_point_id.as_str()) {
                return Err(PipelineError::Precondition(format!(
                    "data point {} has more than one initial code",
                    c.data_point_id
                )));
            }
        }
        let key = StageKey::new(Stage::Collation, round);
        let tag0 = CallTag::new(Stage::Collation, round, 0);
        let prompt_err = |tag: &CallTag| {
            let tag = tag.clone();
            move |source| PipelineError::Prompt { tag, source }
        };
        let budget = self
            .prompts
            .collation_budget(ctx, codes.iter().map(|c| c.data_point_id.as_str()))
            .map_err(prompt_err(&tag0))?;
        let batches = pack_items(
            codes.iter().map(|c| (c.data_point_id.clone(), c.code_text.clone())),
            &budget,
            self.prompts.counter().as_ref(),
        )
        .map_err(|e| prompt_err(&tag0)(e.into()))?;
        let plan = StagePlan {
            inputs_digest: digest_of(&serde_json::json!({
                "codes": codes,
                "context": ctx,
                "params": self.params(Stage::Collation),
                "limits": self.prompts.limits(),
            })),
            batches: batches.iter().map(Batch::ids).collect(),
        };
        let done = self.start(key, &plan)?;

        let mut labels = LabelRegistry::default();
        for v in &done {
            let rows: Vec<ThemeRow> = decode(key, v)?;
            for r in rows {
                labels.assign(r.id, &r.theme);
            }
        }
        let schema = row_schema("theme", Schema::NonEmptyString);
        let carry_size = self.prompts.limits().carry_size;
        for batch in &batches[done.len()..] {
            let tag = CallTag::new(Stage::Collation, round, batch.index);
            let carry = most_frequent(&labels.frequencies(), carry_size);
            let prompt = self
                .prompts
                .build_collation(batch, ctx, &carry)
                .map_err(prompt_err(&tag))?;
            let rows = self.batch_rows(&tag, prompt, &batch.ids(), &schema, |row| {
                Ok(row["theme"].as_str().unwrap_or_default().trim().to_string())
            })?;
            let rows: Vec<ThemeRow> = rows
                .into_iter()
                .map(|(id, theme)| ThemeRow { id, theme })
                .collect();
            self.commit(key, batch.index, batches.len(), &encode(&rows))?;
            for r in rows {
                labels.assign(r.id, &r.theme);
            }
        }
        Ok(labels.into_collation())
    }

    /// Groups candidate themes into at most `max_themes` high-level themes
    /// that partition the candidates.
    pub fn run_theme_merge(
        &self,
        candidates: &[(String, usize)],
        ctx: &AnalysisContext,
        round: u32,
    ) -> Result<ThemeSet, PipelineError> {
        if candidates.is_empty() {
            return Err(PipelineError::Precondition("no candidate themes to merge".into()));
        }
        let key = StageKey::new(Stage::Merge, round);
        let tag = CallTag::new(Stage::Merge, round, 0);
        let labels: Vec<String> = candidates.iter().map(|(l, _)| l.clone()).collect();
        let plan = StagePlan {
            inputs_digest: digest_of(&serde_json::json!({
                "candidates": candidates,
                "context": ctx,
                "params": self.params(Stage::Merge),
                "limits": self.prompts.limits(),
            })),
            batches: vec![labels.clone()],
        };
        let done = self.start(key, &plan)?;
        if let Some(v) = done.first() {
            return decode(key, v);
        }

        let prompt = self
            .prompts
            .build_merge(candidates, ctx)
            .map_err(|source| PipelineError::Prompt {
                tag: tag.clone(),
                source,
            })?;
        let schema = Schema::non_empty_array_of(Schema::object(vec![
            Field::required("theme", Schema::NonEmptyString),
            Field::required("sub_themes", Schema::non_empty_array_of(Schema::NonEmptyString)),
        ]));
        let max_themes = self.prompts.limits().max_themes;
        let original = prompt.into_request(self.params(Stage::Merge));
        let mut request = original.clone();
        let mut problems = String::new();
        for attempt in 0..2 {
            let resp = self.gateway.complete_structured(&request, &tag, &schema)?;
            let rows: Vec<MergeRow> = serde_json::from_value(resp.value)
                .map_err(|e| PipelineError::InvalidOutput {
                    tag: tag.clone(),
                    problems: vec![e.to_string()],
                })?;
            let set = ThemeSet {
                themes: rows
                    .into_iter()
                    .map(|r| HighLevelTheme {
                        label: r.theme.trim().to_string(),
                        sub_themes: r.sub_themes,
                    })
                    .collect(),
            };
            problems = match validate_theme_set(&set, &labels) {
                Ok(()) if set.len() <= max_themes => {
                    let set = canonical_sub_themes(set, &labels);
                    self.commit(key, 0, 1, &encode(&set))?;
                    return Ok(set);
                }
                Ok(()) => format!("{} high-level themes, at most {max_themes} allowed", set.len()),
                Err(v) => v.to_string(),
            };
            if attempt == 0 {
                tracing::warn!(%tag, %problems, "re-prompting after invalid theme set");
                request.user_message = format!(
                    "{}\n\n{}",
                    original.user_message,
                    corrective_message(&problems)
                );
            }
        }
        Err(PipelineError::InvalidOutput {
            tag,
            problems: vec![problems],
        })
    }

    /// Assigns `k` ranked labels from `themes` to every data point. Batches
    /// are sent by up to `parallelism` workers; results are committed in
    /// batch order, so the output does not depend on `parallelism`.
    pub fn run_classification(
        &self,
        ds: &Dataset,
        themes: &[String],
        k: usize,
        parallelism: usize,
        round: u32,
    ) -> Result<Vec<ThemeAssignment>, PipelineError> {
        if parallelism == 0 {
            return Err(PipelineError::Precondition("parallelism must be at least 1".into()));
        }
        let mut keys = BTreeSet::new();
        for t in themes {
            if t.trim().is_empty() || !keys.insert(label_key(t)) {
                return Err(PipelineError::Precondition(format!(
                    "theme list has a blank or repeated label: {t:?}"
                )));
            }
        }
        let key = StageKey::new(Stage::Classification, round);
        let tag0 = CallTag::new(Stage::Classification, round, 0);
        let budget = self
            .prompts
            .classification_budget(themes, k, ds.ids())
            .map_err(|source| PipelineError::Prompt {
                tag: tag0.clone(),
                source,
            })?;
        let batches = pack_items(
            ds.points().iter().map(|p| (p.id.clone(), p.text.clone())),
            &budget,
            self.prompts.counter().as_ref(),
        )
        .map_err(|e| PipelineError::Prompt {
            tag: tag0.clone(),
            source: e.into(),
        })?;
        let plan = StagePlan {
            inputs_digest: digest_of(&serde_json::json!({
                "dataset": ds.to_jsonl(),
                "themes": themes,
                "k": k,
                "params": self.params(Stage::Classification),
            })),
            batches: batches.iter().map(Batch::ids).collect(),
        };
        let done = self.start(key, &plan)?;

        let mut rows: Vec<RankRow> = Vec::with_capacity(ds.len());
        for v in &done {
            rows.extend(decode::<Vec<RankRow>>(key, v)?);
        }

        let canonical: HashMap<String, &String> = themes.iter().map(|t| (label_key(t), t)).collect();
        let normalize = |row: &Value| -> Result<Vec<String>, String> {
            let raw: Vec<&str> = row["themes"]
                .as_array()
                .map(|a| a.iter().filter_map(Value::as_str).collect())
                .unwrap_or_default();
            let mut out: Vec<String> = Vec::with_capacity(k);
            for label in raw {
                let Some(t) = canonical.get(&label_key(label)) else {
                    return Err(format!("label {label:?} is not in the theme list"));
                };
                if out.contains(t) {
                    return Err(format!("label {label:?} repeated"));
                }
                out.push((*t).clone());
                if out.len() == k {
                    break;
                }
            }
            if out.len() < k {
                return Err(format!("{} label(s) given, {k} required", out.len()));
            }
            Ok(out)
        };
        let schema = row_schema("themes", Schema::non_empty_array_of(Schema::NonEmptyString));
        let pending = &batches[done.len()..];
        let run_one = |batch: &Batch| -> Result<Vec<RankRow>, PipelineError> {
            let tag = CallTag::new(Stage::Classification, round, batch.index);
            let prompt = self
                .prompts
                .build_classification(batch, themes, k)
                .map_err(|source| PipelineError::Prompt {
                    tag: tag.clone(),
                    source,
                })?;
            let got = self.batch_rows(&tag, prompt, &batch.ids(), &schema, &normalize)?;
            Ok(got
                .into_iter()
                .map(|(id, themes)| RankRow { id, themes })
                .collect())
        };

        let next = AtomicUsize::new(0);
        let stop = AtomicBool::new(false);
        let (tx, rx) = mpsc::channel::<(usize, Result<Vec<RankRow>, PipelineError>)>();
        let mut first_error = None;
        std::thread::scope(|scope| {
            for _ in 0..parallelism.min(pending.len()) {
                let tx = tx.clone();
                let (next, stop, run_one) = (&next, &stop, &run_one);
                scope.spawn(move || loop {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(batch) = pending.get(i) else { break };
                    let result = run_one(batch);
                    if result.is_err() {
                        stop.store(true, Ordering::SeqCst);
                    }
                    if tx.send((i, result)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);

            let mut buffer: BTreeMap<usize, Vec<RankRow>> = BTreeMap::new();
            let mut expected = 0;
            for (i, result) in rx {
                match result {
                    Ok(r) => {
                        buffer.insert(i, r);
                    }
                    Err(e) => {
                        // the lowest failing batch decides the reported error
                        if first_error.as_ref().is_none_or(|(j, _)| i < *j) {
                            first_error = Some((i, e));
                        }
                        stop.store(true, Ordering::SeqCst);
                    }
                }
                while let Some(r) = buffer.remove(&expected) {
                    if first_error.as_ref().is_some_and(|(j, _)| *j < expected) {
                        break;
                    }
                    let batch = &pending[expected];
                    if let Err(e) = self.commit(key, batch.index, batches.len(), &encode(&r)) {
                        first_error = Some((expected, e));
                        stop.store(true, Ordering::SeqCst);
                        break;
                    }
                    rows.extend(r);
                    expected += 1;
                }
            }
        });
        if let Some((_, e)) = first_error {
            return Err(e);
        }

        let mut by_id: HashMap<String, Vec<String>> =
            rows.into_iter().map(|r| (r.id, r.themes)).collect();
        Ok(ds
            .ids()
            .map(|id| ThemeAssignment {
                data_point_id: id.to_string(),
                ranked_themes: by_id.remove(id).unwrap_or_default(),
            })
            .collect())
    }

    /// Coding, collation, merge and classification in one go, treating the
    /// merged theme set as approved.
    pub fn run_end_to_end(
        &self,
        ds: &Dataset,
        ctx: &AnalysisContext,
        seed: u64,
        k: usize,
        parallelism: usize,
    ) -> Result<(ThemeSet, Vec<ThemeAssignment>), PipelineError> {
        let round = 1;
        let codes = self.run_initial_coding(ds, ctx, round, seed)?;
        let collation = self.run_code_collation(&codes, ctx, round)?;
        let themes = self.run_theme_merge(&collation.frequencies(), ctx, round)?;
        let assignments = self.run_classification(ds, &themes.labels(), k, parallelism, round)?;
        Ok((themes, assignments))
    }
}

/// Candidate labels keyed by [`label_key`], keeping the first spelling.
#[derive(Debug, Default)]
struct LabelRegistry {
    spelling: HashMap<String, String>,
    members: BTreeMap<String, BTreeSet<String>>,
    candidate_of: BTreeMap<String, String>,
}

impl LabelRegistry {
    fn assign(&mut self, id: String, label: &str) {
        let label = self
            .spelling
            .entry(label_key(label))
            .or_insert_with(|| label.trim().to_string())
            .clone();
        self.members.entry(label.clone()).or_default().insert(id.clone());
        self.candidate_of.insert(id, label);
    }

    fn frequencies(&self) -> BTreeMap<String, usize> {
        self.members.iter().map(|(l, m)| (l.clone(), m.len())).collect()
    }

    fn into_collation(self) -> Collation {
        let order = most_frequent(&self.frequencies(), usize::MAX);
        let mut members = self.members;
        let themes = order
            .into_iter()
            .map(|label| {
                let member_ids = members.remove(&label).unwrap_or_default();
                PotentialTheme { label, member_ids }
            })
            .collect();
        Collation {
            candidate_of: self.candidate_of,
            themes,
        }
    }
}

/// Rewrites sub-theme labels to the candidates' own spelling.
fn canonical_sub_themes(mut set: ThemeSet, candidates: &[String]) -> ThemeSet {
    let by_key: HashMap<String, &String> = candidates.iter().map(|c| (label_key(c), c)).collect();
    for t in &mut set.themes {
        for s in &mut t.sub_themes {
            if let Some(c) = by_key.get(&label_key(s)) {
                *s = (*c).clone();
            }
        }
    }
    set
}
