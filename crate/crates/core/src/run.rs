//! Operations on a persisted run, shared by the command line and the HTTP
//! service.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    label_key, AnalysisContext, Dataset, InitialCode, QualityAnnotation, Stage, ThemeAssignment,
    ThemeSet,
};
use crate::evaluation::{
    recall_at_k, tally_by_round, theme_mapping, EvalError, MappingMatrix, QualityTally,
    RecallReport,
};
use crate::gateway::{ChatBackend, Gateway, RetryPolicy};
use crate::pipeline::{
    apply_feedback, Collation, EmptyFeedback, Feedback, Pipeline, PipelineError, ProgressFn,
    StageKey,
};
use crate::prompt::{GeneralResources, PromptBuilder, PromptError, PromptLimits, StageParams, Templates};
use crate::store::{FeedbackRecord, RunStore, StoreError, ThemeRecord, ThemeStatus};
use crate::tokens::{HeuristicCounter, TokenCounter, WordCounter};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    /// About four characters per token.
    #[default]
    Heuristic,
    /// One token per whitespace-separated word.
    Words,
}

impl TokenizerKind {
    pub fn counter(self) -> Arc<dyn TokenCounter> {
        match self {
            TokenizerKind::Heuristic => Arc::new(HeuristicCounter),
            TokenizerKind::Words => Arc::new(WordCounter),
        }
    }
}

/// Settings fixed when a run is created and kept in its manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub seed: u64,
    pub k: usize,
    pub parallelism: usize,
    pub tokenizer: TokenizerKind,
    pub limits: PromptLimits,
    pub params: StageParams,
    /// Directory overriding the built-in general resources.
    pub resources_dir: Option<PathBuf>,
    /// Directory overriding the built-in prompt templates.
    pub templates_dir: Option<PathBuf>,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            seed: 1,
            k: 3,
            parallelism: 4,
            tokenizer: TokenizerKind::default(),
            limits: PromptLimits::default(),
            params: StageParams::default(),
            resources_dir: None,
            templates_dir: None,
        }
    }
}

impl RunSettings {
    pub fn validate(&self) -> Result<(), RunError> {
        if self.k == 0 {
            return Err(RunError::Config("k must be at least 1".into()));
        }
        if self.parallelism == 0 {
            return Err(RunError::Config("parallelism must be at least 1".into()));
        }
        if self.limits.carry_size == 0 || self.limits.max_themes == 0 {
            return Err(RunError::Config("carry_size and max_themes must be at least 1".into()));
        }
        for stage in Stage::ALL {
            self.params
                .get(stage)
                .validate()
                .map_err(|e| RunError::Config(format!("{stage} parameters: {e}")))?;
        }
        for dir in [&self.resources_dir, &self.templates_dir].into_iter().flatten() {
            if !dir.is_dir() {
                return Err(RunError::Config(format!("{} is not a directory", dir.display())));
            }
        }
        Ok(())
    }

    /// Prompt builder with the configured resources, templates and counter.
    pub fn prompt_builder(&self) -> Result<PromptBuilder, RunError> {
        let resources = match &self.resources_dir {
            Some(d) => GeneralResources::load_dir(d)?,
            None => GeneralResources::default(),
        };
        let templates = match &self.templates_dir {
            Some(d) => Templates::load_dir(d)?,
            None => Templates::default(),
        };
        Ok(PromptBuilder::new(
            resources,
            templates,
            self.tokenizer.counter(),
            self.params.clone(),
            self.limits,
        )?)
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Feedback(#[from] EmptyFeedback),
    #[error("the theme set is not approved; approve it first or allow unapproved themes")]
    ThemesUnapproved,
    #[error("{0}")]
    State(String),
    #[error("{0}")]
    Validation(String),
}

/// Report produced by [`RunView::evaluate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub recall: Option<RecallReport>,
    /// Quality verdict tallies per coding round.
    pub quality: BTreeMap<u32, QualityTally>,
    pub mapping: Option<MappingMatrix>,
}

impl EvaluationReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        match &self.recall {
            Some(r) => {
                out.push_str(&format!("Recall (k = {})\n", r.k));
                out.push_str(&r.to_text());
            }
            None => out.push_str("Recall: no gold themes or no classification yet\n"),
        }
        for (round, t) in &self.quality {
            out.push_str(&format!("\nInitial code quality, round {round}\n"));
            out.push_str(&t.to_text());
        }
        if let Some(m) = &self.mapping {
            out.push_str("\nGold vs automatic themes\n");
            out.push_str(&m.to_text());
        }
        out
    }
}

/// Read-only queries over a run.
pub struct RunView<'a> {
    store: &'a RunStore,
}

impl<'a> RunView<'a> {
    pub fn new(store: &'a RunStore) -> Self {
        Self { store }
    }

    pub fn current_round(&self) -> Result<u32, RunError> {
        Ok(self.store.latest_context()?.map_or(0, |s| s.round))
    }

    /// Committed codes of a coding round, in dataset order.
    pub fn codes(&self, round: u32) -> Result<Vec<InitialCode>, RunError> {
        let Some(p) = self.store.stage_progress(StageKey::new(Stage::Coding, round))? else {
            return Ok(Vec::new());
        };
        let mut codes = p.initial_codes(round).map_err(PipelineError::from)?;
        let ds = self.store.dataset()?;
        let order: BTreeMap<&str, usize> = ds.ids().enumerate().map(|(i, id)| (id, i)).collect();
        codes.sort_by_key(|c| order.get(c.data_point_id.as_str()).copied().unwrap_or(usize::MAX));
        Ok(codes)
    }

    /// Latest fully coded round.
    pub fn latest_coded_round(&self) -> Result<Option<u32>, RunError> {
        Ok(self.store.latest_complete(Stage::Coding)?.map(|(r, _)| r))
    }

    pub fn collation(&self, round: u32) -> Result<Option<Collation>, RunError> {
        match self.store.stage_progress(StageKey::new(Stage::Collation, round))? {
            Some(p) if p.is_complete() => Ok(Some(p.collation().map_err(PipelineError::from)?)),
            _ => Ok(None),
        }
    }

    pub fn themes(&self) -> Result<Option<ThemeRecord>, RunError> {
        Ok(self.store.theme_records()?.pop())
    }

    /// Assignments of the latest complete classification.
    pub fn assignments(&self) -> Result<Option<Vec<ThemeAssignment>>, RunError> {
        match self.store.latest_complete(Stage::Classification)? {
            Some((_, p)) => Ok(Some(p.assignments().map_err(PipelineError::from)?)),
            None => Ok(None),
        }
    }

    pub fn evaluate(&self, k: usize) -> Result<EvaluationReport, RunError> {
        let ds = self.store.dataset()?;
        let gold = ds.gold();
        let quality = tally_by_round(&self.store.annotations()?)?;
        let (recall, mapping) = match (self.assignments()?, gold.is_empty()) {
            (Some(assignments), false) => {
                let themes = self.store.approved_themes()?.map(|r| r.themes.labels());
                let recall = recall_at_k(&assignments, &gold, k, themes.as_deref())?;
                let mapping = theme_mapping(&assignments, &gold)?;
                (Some(recall), Some(mapping))
            }
            _ => (None, None),
        };
        Ok(EvaluationReport {
            recall,
            quality,
            mapping,
        })
    }
}

/// A writable run with a model backend.
pub struct Run {
    store: Arc<RunStore>,
    pipeline: Pipeline,
}

impl Run {
    /// Creates the run directory, stores the dataset and the first-round
    /// context.
    pub fn ingest(
        dir: &Path,
        dataset: &Dataset,
        context: &AnalysisContext,
        settings: RunSettings,
    ) -> Result<RunStore, RunError> {
        settings.validate()?;
        settings.prompt_builder()?;
        context
            .validate()
            .map_err(|e| RunError::Validation(e.to_string()))?;
        let store = RunStore::create(dir, dataset, settings)?;
        store.append_context(context)?;
        Ok(store)
    }

    pub fn open(
        store: Arc<RunStore>,
        backend: Arc<dyn ChatBackend>,
        retry: RetryPolicy,
    ) -> Result<Self, RunError> {
        if !store.is_writable() {
            return Err(RunError::State("run is open read-only".into()));
        }
        let settings = &store.manifest().settings;
        let prompts = settings.prompt_builder()?;
        let gateway = Gateway::new(backend, settings.tokenizer.counter(), store.clone()).with_retry(retry);
        let pipeline = Pipeline::new(gateway, prompts).with_checkpoint(store.clone());
        Ok(Self { store, pipeline })
    }

    pub fn with_progress(mut self, progress: Arc<ProgressFn>) -> Self {
        self.pipeline = self.pipeline.with_progress(progress);
        self
    }

    pub fn store(&self) -> &RunStore {
        &self.store
    }

    pub fn view(&self) -> RunView<'_> {
        RunView::new(&self.store)
    }

    fn settings(&self) -> &RunSettings {
        &self.store.manifest().settings
    }

    fn context_for(&self, round: u32) -> Result<AnalysisContext, RunError> {
        self.store
            .context(round)?
            .ok_or_else(|| RunError::State(format!("no analysis context for round {round}")))
    }

    /// Codes the dataset for `round` (default: the latest context round).
    pub fn code(&self, round: Option<u32>, seed: Option<u64>) -> Result<Vec<InitialCode>, RunError> {
        let round = match round {
            Some(r) => r,
            None => self.view().current_round()?,
        };
        let ctx = self.context_for(round)?;
        let ds = self.store.dataset()?;
        let seed = seed.unwrap_or(self.settings().seed);
        let out = self.pipeline.run_initial_coding(&ds, &ctx, round, seed);
        self.logged(Stage::Coding, round, out)
    }

    /// See [`Review::feedback`].
    pub fn feedback(&self, feedback: &Feedback) -> Result<u32, RunError> {
        Review::new(&self.store).feedback(feedback)
    }

    fn coded_round(&self, round: Option<u32>) -> Result<u32, RunError> {
        match round {
            Some(r) => Ok(r),
            None => self
                .view()
                .latest_coded_round()?
                .ok_or_else(|| RunError::State("no completed coding round".into())),
        }
    }

    /// Collates the codes of `round` (default: the latest fully coded round).
    pub fn collate(&self, round: Option<u32>) -> Result<Collation, RunError> {
        let round = self.coded_round(round)?;
        let codes = self.view().codes(round)?;
        let ds = self.store.dataset()?;
        if codes.len() != ds.len() {
            return Err(RunError::State(format!("coding round {round} is not complete")));
        }
        let ctx = self.context_for(round)?;
        let out = self.pipeline.run_code_collation(&codes, &ctx, round);
        self.logged(Stage::Collation, round, out)
    }

    /// Merges the candidate themes of `round` and records the proposal.
    pub fn merge(&self, round: Option<u32>) -> Result<ThemeSet, RunError> {
        let round = match round {
            Some(r) => r,
            None => self
                .store
                .latest_complete(Stage::Collation)?
                .map(|(r, _)| r)
                .ok_or_else(|| RunError::State("no completed collation".into()))?,
        };
        let collation = self
            .view()
            .collation(round)?
            .ok_or_else(|| RunError::State(format!("collation round {round} is not complete")))?;
        let ctx = self.context_for(round)?;
        let out = self.pipeline.run_theme_merge(&collation.frequencies(), &ctx, round);
        let set = self.logged(Stage::Merge, round, out)?;
        let proposal = ThemeRecord {
            status: ThemeStatus::Proposed,
            round,
            themes: set.clone(),
            edited: false,
        };
        let latest = self.store.theme_records()?.pop();
        let already = latest.is_some_and(|r| r.round == round && r.themes == set);
        if !already {
            self.store.append_themes(&proposal)?;
        }
        Ok(set)
    }

    /// See [`Review::approve_themes`].
    pub fn approve_themes(&self, edited: Option<ThemeSet>) -> Result<ThemeRecord, RunError> {
        Review::new(&self.store).approve_themes(edited)
    }

    /// Classifies every data point against the approved themes.
    pub fn classify(
        &self,
        k: Option<usize>,
        parallelism: Option<usize>,
        allow_unapproved: bool,
    ) -> Result<Vec<ThemeAssignment>, RunError> {
        let themes = match self.store.approved_themes()? {
            Some(r) => r.themes,
            None if allow_unapproved => self
                .store
                .theme_records()?
                .pop()
                .ok_or_else(|| RunError::State("no theme set to classify against".into()))?
                .themes,
            None => return Err(RunError::ThemesUnapproved),
        };
        let k = k.unwrap_or(self.settings().k);
        let parallelism = parallelism.unwrap_or(self.settings().parallelism);
        let ds = self.store.dataset()?;
        let out = self
            .pipeline
            .run_classification(&ds, &themes.labels(), k, parallelism, 1);
        self.logged(Stage::Classification, 1, out)
    }

    /// Records a stage failure in the run's event log before returning it.
    fn logged<T>(&self, stage: Stage, round: u32, out: Result<T, PipelineError>) -> Result<T, RunError> {
        match out {
            Ok(v) => {
                self.store
                    .log_event("stage_finished", serde_json::json!({"stage": stage, "round": round}))?;
                Ok(v)
            }
            Err(e) => {
                let batch = e.locus().map(|t| t.batch);
                let logged = self.store.log_event(
                    "stage_failed",
                    serde_json::json!({"stage": stage, "round": round, "batch": batch, "error": e.to_string()}),
                );
                if let Err(le) = logged {
                    tracing::warn!(error = %le, "could not record stage failure");
                }
                Err(e.into())
            }
        }
    }
}

/// Expert actions on a run. None of them calls the model.
pub struct Review<'a> {
    store: &'a RunStore,
}

impl<'a> Review<'a> {
    pub fn new(store: &'a RunStore) -> Self {
        Self { store }
    }

    /// Records feedback on the latest round and opens the next round's
    /// context. Returns the new round.
    pub fn feedback(&self, feedback: &Feedback) -> Result<u32, RunError> {
        let latest = self
            .store
            .latest_context()?
            .ok_or_else(|| RunError::State("run has no analysis context".into()))?;
        let next = apply_feedback(&latest.context, feedback)?;
        self.store.append_feedback(&FeedbackRecord {
            round: latest.round,
            feedback: feedback.clone(),
        })?;
        Ok(self.store.append_context(&next)?)
    }

    /// Approves the latest proposal, or `edited` in its place. With no
    /// proposal, `edited` is required and is taken as given by the expert.
    pub fn approve_themes(&self, edited: Option<ThemeSet>) -> Result<ThemeRecord, RunError> {
        let latest = self.store.theme_records()?.pop();
        let (round, themes, was_edited) = match (latest, edited) {
            (Some(p), None) => (p.round, p.themes, false),
            (Some(p), Some(e)) => {
                let changed = p.themes != e;
                (p.round, e, changed)
            }
            (None, Some(e)) => (0, e, true),
            (None, None) => return Err(RunError::State("no theme set to approve".into())),
        };
        check_theme_list(&themes)?;
        let record = ThemeRecord {
            status: ThemeStatus::Approved,
            round,
            themes,
            edited: was_edited,
        };
        self.store.append_themes(&record)?;
        Ok(record)
    }

    /// Stores quality verdicts. Every annotated data point must exist and
    /// its round must have been coded.
    pub fn annotate(&self, batch: &[QualityAnnotation]) -> Result<usize, RunError> {
        let ds = self.store.dataset()?;
        let rounds = self.store.stage_rounds(Stage::Coding)?;
        for a in batch {
            if ds.get(&a.data_point_id).is_none() {
                return Err(RunError::Validation(format!("unknown data point {:?}", a.data_point_id)));
            }
            if !rounds.contains(&a.round) {
                return Err(RunError::Validation(format!("round {} has no initial codes", a.round)));
            }
        }
        self.store.append_annotations(batch)?;
        Ok(batch.len())
    }
}

fn check_theme_list(set: &ThemeSet) -> Result<(), RunError> {
    if set.is_empty() {
        return Err(RunError::Validation("theme set is empty".into()));
    }
    let mut keys = std::collections::BTreeSet::new();
    for t in &set.themes {
        if t.label.trim().is_empty() {
            return Err(RunError::Validation("theme label is blank".into()));
        }
        if !keys.insert(label_key(&t.label)) {
            return Err(RunError::Validation(format!("theme {:?} appears twice", t.label)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_from_partial_toml() {
        let s: RunSettings = toml::from_str(
            "seed = 7\n[limits]\ninterim_sample_size = 5\n[params.merge]\nmax_tokens = 100\n",
        )
        .unwrap();
        assert_eq!(s.seed, 7);
        assert_eq!(s.limits.interim_sample_size, 5);
        assert_eq!(s.limits.carry_size, 20);
        assert_eq!(s.params.merge.max_tokens, 100);
        assert_eq!(s.params.classification.max_tokens, 1500);
        assert!(toml::from_str::<RunSettings>("bogus = 1").is_err());
        assert!(RunSettings { k: 0, ..RunSettings::default() }.validate().is_err());
    }
}
