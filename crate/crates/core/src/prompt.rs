//! Construction of system and user messages for every stage.
//!
//! The system message carries the general resources (method definition,
//! quality checklist, stage output format). The user message carries the
//! analysis-specific content and the batch. Both are rendered from
//! `{placeholder}` templates that can be replaced by files on disk.
//!
//! Prompt assembly only ever sees ids and texts; gold labels never reach it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AnalysisContext, GenerationParams, InitialCode, Stage};
use crate::gateway::CompletionRequest;
use crate::tokens::{truncate_to_fit, Batch, BudgetError, TokenBudget, TokenCounter};

const ITEM_BEGIN: &str = "<<<BEGIN id=";
const ITEM_END: &str = "<<<END id=";
const ITEM_CLOSE: &str = ">>>";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("template {name}: {message}")]
    Template { name: String, message: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{stage} prompt needs {needed} tokens including the completion, limit is {limit}; the batch was packed too large")]
    Overflow {
        stage: Stage,
        needed: usize,
        limit: usize,
    },
    #[error(
        "the {count} candidate themes need {needed} tokens but one merge prompt allows {limit}; \
         split the candidates into groups, merge each group, and approve the combined theme set with `approve-themes --file`"
    )]
    MergeTooLarge {
        count: usize,
        needed: usize,
        limit: usize,
    },
    #[error("at most {max} carried themes allowed, got {got}")]
    CarryTooLarge { max: usize, got: usize },
    #[error("{0}")]
    Precondition(String),
    #[error(transparent)]
    Budget(#[from] BudgetError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slot(String),
}

/// A text with `{name}` placeholders; `{{` and `}}` stand for literal braces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    segments: Vec<Segment>,
}

impl Template {
    pub fn parse(name: &str, text: &str) -> Result<Self, PromptError> {
        let err = |message: String| PromptError::Template {
            name: name.to_string(),
            message,
        };
        let mut segments = Vec::new();
        let mut literal = String::new();
        let mut chars = text.char_indices().peekable();
        while let Some((pos, ch)) = chars.next() {
            match ch {
                '{' if chars.peek().map(|c| c.1) == Some('{') => {
                    chars.next();
                    literal.push('{');
                }
                '}' if chars.peek().map(|c| c.1) == Some('}') => {
                    chars.next();
                    literal.push('}');
                }
                '{' => {
                    let mut slot = String::new();
                    loop {
                        match chars.next() {
                            Some((_, '}')) => break,
                            Some((_, c)) if c.is_ascii_lowercase() || c == '_' => slot.push(c),
                            _ => return Err(err(format!("bad placeholder at byte {pos}"))),
                        }
                    }
                    if slot.is_empty() {
                        return Err(err(format!("empty placeholder at byte {pos}")));
                    }
                    if !literal.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut literal)));
                    }
                    segments.push(Segment::Slot(slot));
                }
                '}' => return Err(err(format!("unmatched '}}' at byte {pos}"))),
                c => literal.push(c),
            }
        }
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        Ok(Self {
            name: name.to_string(),
            segments,
        })
    }

    pub fn placeholders(&self) -> BTreeSet<String> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Slot(n) => Some(n.clone()),
                Segment::Literal(_) => None,
            })
            .collect()
    }

    pub fn render(&self, values: &BTreeMap<&str, String>) -> Result<String, PromptError> {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(l) => out.push_str(l),
                Segment::Slot(n) => match values.get(n.as_str()) {
                    Some(v) => out.push_str(v),
                    None => {
                        return Err(PromptError::Template {
                            name: self.name.clone(),
                            message: format!("no value for {{{n}}}"),
                        })
                    }
                },
            }
        }
        Ok(out)
    }
}

/// Resources that stay the same whatever analysis is run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneralResources {
    pub method_definition: String,
    pub quality_checklist: String,
    pub output_formats: BTreeMap<Stage, String>,
}

impl Default for GeneralResources {
    fn default() -> Self {
        let output_formats = BTreeMap::from([
            (Stage::Coding, include_str!("../resources/general/output_coding.txt").to_string()),
            (Stage::Collation, include_str!("../resources/general/output_collation.txt").to_string()),
            (Stage::Merge, include_str!("../resources/general/output_merge.txt").to_string()),
            (
                Stage::Classification,
                include_str!("../resources/general/output_classification.txt").to_string(),
            ),
        ]);
        Self {
            method_definition: include_str!("../resources/general/method_definition.txt").to_string(),
            quality_checklist: include_str!("../resources/general/quality_checklist.txt").to_string(),
            output_formats,
        }
    }
}

fn read_override(dir: &Path, file: &str) -> Result<Option<String>, PromptError> {
    let path = dir.join(file);
    if !path.exists() {
        return Ok(None);
    }
    std::fs::read_to_string(&path)
        .map(Some)
        .map_err(|e| PromptError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
}

impl GeneralResources {
    /// Defaults, with any of `method_definition.txt`, `quality_checklist.txt`
    /// and `output_<stage>.txt` found in `dir` taking precedence.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut r = Self::default();
        if let Some(t) = read_override(dir, "method_definition.txt")? {
            r.method_definition = t;
        }
        if let Some(t) = read_override(dir, "quality_checklist.txt")? {
            r.quality_checklist = t;
        }
        for stage in Stage::ALL {
            if let Some(t) = read_override(dir, &format!("output_{stage}.txt"))? {
                r.output_formats.insert(stage, t);
            }
        }
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let blank = |name: &str| PromptError::Template {
            name: name.to_string(),
            message: "resource is empty".into(),
        };
        if self.method_definition.trim().is_empty() {
            return Err(blank("method_definition"));
        }
        if self.quality_checklist.trim().is_empty() {
            return Err(blank("quality_checklist"));
        }
        for stage in Stage::ALL {
            if self.output_formats.get(&stage).is_none_or(|t| t.trim().is_empty()) {
                return Err(blank(&format!("output_{stage}")));
            }
        }
        Ok(())
    }
}

/// System and user skeletons for one stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub stage: Stage,
    pub system: Template,
    pub user: Template,
}

const SYSTEM_SLOTS: [&str; 3] = ["method_definition", "quality_checklist", "output_format"];

fn user_slots(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Coding => &[
            "research_questions",
            "analysis_parameters",
            "custom_requirements",
            "exemplars",
            "interim_codes",
            "items",
        ],
        Stage::Collation => &[
            "research_questions",
            "analysis_parameters",
            "theme_specification",
            "carried_themes",
            "items",
        ],
        Stage::Merge => &[
            "research_questions",
            "analysis_parameters",
            "theme_specification",
            "max_themes",
            "candidates",
        ],
        Stage::Classification => &["themes", "instruction", "items"],
    }
}

fn default_template_text(stage: Stage) -> (&'static str, &'static str) {
    match stage {
        Stage::Coding => (
            include_str!("../resources/templates/coding.system.txt"),
            include_str!("../resources/templates/coding.user.txt"),
        ),
        Stage::Collation => (
            include_str!("../resources/templates/collation.system.txt"),
            include_str!("../resources/templates/collation.user.txt"),
        ),
        Stage::Merge => (
            include_str!("../resources/templates/merge.system.txt"),
            include_str!("../resources/templates/merge.user.txt"),
        ),
        Stage::Classification => (
            include_str!("../resources/templates/classification.system.txt"),
            include_str!("../resources/templates/classification.user.txt"),
        ),
    }
}

impl PromptTemplate {
    pub fn new(stage: Stage, system: &str, user: &str) -> Result<Self, PromptError> {
        let t = Self {
            stage,
            system: Template::parse(&format!("{stage}.system"), system)?,
            user: Template::parse(&format!("{stage}.user"), user)?,
        };
        t.check_slots()?;
        Ok(t)
    }

    pub fn default_for(stage: Stage) -> Self {
        let (s, u) = default_template_text(stage);
        Self::new(stage, s, u).expect("built-in templates are valid")
    }

    fn check_slots(&self) -> Result<(), PromptError> {
        let expect_sys: BTreeSet<String> = SYSTEM_SLOTS.iter().map(|s| s.to_string()).collect();
        let expect_user: BTreeSet<String> =
            user_slots(self.stage).iter().map(|s| s.to_string()).collect();
        for (tpl, expected) in [(&self.system, expect_sys), (&self.user, expect_user)] {
            let got = tpl.placeholders();
            if got != expected {
                let missing: Vec<_> = expected.difference(&got).cloned().collect();
                let extra: Vec<_> = got.difference(&expected).cloned().collect();
                return Err(PromptError::Template {
                    name: tpl.name.clone(),
                    message: format!("placeholders missing {missing:?}, unexpected {extra:?}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    by_stage: BTreeMap<Stage, PromptTemplate>,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            by_stage: Stage::ALL
                .into_iter()
                .map(|s| (s, PromptTemplate::default_for(s)))
                .collect(),
        }
    }
}

impl Templates {
    /// Defaults, overridden by `<stage>.system.txt` / `<stage>.user.txt` in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut by_stage = BTreeMap::new();
        for stage in Stage::ALL {
            let (ds, du) = default_template_text(stage);
            let s = read_override(dir, &format!("{stage}.system.txt"))?;
            let u = read_override(dir, &format!("{stage}.user.txt"))?;
            let t = PromptTemplate::new(stage, s.as_deref().unwrap_or(ds), u.as_deref().unwrap_or(du))?;
            by_stage.insert(stage, t);
        }
        Ok(Self { by_stage })
    }

    pub fn get(&self, stage: Stage) -> &PromptTemplate {
        &self.by_stage[&stage]
    }

    pub fn set(&mut self, template: PromptTemplate) {
        self.by_stage.insert(template.stage, template);
    }
}

/// Per-stage generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageParams {
    pub coding: GenerationParams,
    pub collation: GenerationParams,
    pub merge: GenerationParams,
    pub classification: GenerationParams,
}

impl Default for StageParams {
    fn default() -> Self {
        Self {
            coding: GenerationParams::with_max_tokens(2000),
            collation: GenerationParams::with_max_tokens(2000),
            merge: GenerationParams::with_max_tokens(3000),
            classification: GenerationParams::with_max_tokens(1500),
        }
    }
}

impl StageParams {
    pub fn get(&self, stage: Stage) -> &GenerationParams {
        match stage {
            Stage::Coding => &self.coding,
            Stage::Collation => &self.collation,
            Stage::Merge => &self.merge,
            Stage::Classification => &self.classification,
        }
    }

    pub fn get_mut(&mut self, stage: Stage) -> &mut GenerationParams {
        match stage {
            Stage::Coding => &mut self.coding,
            Stage::Collation => &mut self.collation,
            Stage::Merge => &mut self.merge,
            Stage::Classification => &mut self.classification,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptLimits {
    /// Interim codes shown to each coding batch.
    pub interim_sample_size: usize,
    /// Most frequent potential themes shown to each collation batch.
    pub carry_size: usize,
    /// Token allowance per interim code or carried theme line.
    pub line_allowance: usize,
    /// Upper bound on high-level themes requested from the merge.
    pub max_themes: usize,
}

impl Default for PromptLimits {
    fn default() -> Self {
        Self {
            interim_sample_size: 20,
            carry_size: 20,
            line_allowance: 40,
            max_themes: 20,
        }
    }
}

/// An assembled pair of messages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

impl Prompt {
    pub fn into_request(self, params: &GenerationParams) -> CompletionRequest {
        CompletionRequest {
            system_message: self.system,
            user_message: self.user,
            params: params.clone(),
        }
    }
}

/// Wraps one batch item in id-carrying delimiters.
pub fn render_item(id: &str, text: &str) -> String {
    format!("{ITEM_BEGIN}{id}{ITEM_CLOSE}\n{text}\n{ITEM_END}{id}{ITEM_CLOSE}\n")
}

/// Ids of all items delimited in `message`, in order of appearance.
pub fn extract_item_ids(message: &str) -> Vec<String> {
    message
        .lines()
        .filter_map(|l| l.strip_prefix(ITEM_BEGIN)?.strip_suffix(ITEM_CLOSE))
        .map(str::to_string)
        .collect()
}

/// The `n` most frequent labels; ties broken by label ascending.
pub fn most_frequent(freq: &BTreeMap<String, usize>, n: usize) -> Vec<String> {
    let mut v: Vec<(&String, &usize)> = freq.iter().collect();
    v.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
    v.into_iter().take(n).map(|(l, _)| l.clone()).collect()
}

fn section(header: &str, lines: impl IntoIterator<Item = String>) -> String {
    let mut out = String::new();
    for l in lines {
        let _ = writeln!(out, "- {l}");
    }
    if out.is_empty() {
        return out;
    }
    format!("{header}\n{out}\n")
}

const INTERIM_HEADER: &str = "Initial codes already predicted for earlier data points (sample):";
const CARRY_HEADER: &str = "Most common potential themes so far:";

/// Builds stage prompts and the token budgets their batches are packed into.
#[derive(Debug, Clone)]
pub struct PromptBuilder {
    resources: GeneralResources,
    templates: Templates,
    counter: Arc<dyn TokenCounter>,
    params: StageParams,
    limits: PromptLimits,
}

impl PromptBuilder {
    pub fn new(
        resources: GeneralResources,
        templates: Templates,
        counter: Arc<dyn TokenCounter>,
        params: StageParams,
        limits: PromptLimits,
    ) -> Result<Self, PromptError> {
        resources.validate()?;
        Ok(Self {
            resources,
            templates,
            counter,
            params,
            limits,
        })
    }

    /// Built-in resources and templates.
    pub fn with_defaults(counter: Arc<dyn TokenCounter>) -> Self {
        Self::new(
            GeneralResources::default(),
            Templates::default(),
            counter,
            StageParams::default(),
            PromptLimits::default(),
        )
        .expect("defaults are valid")
    }

    pub fn params(&self, stage: Stage) -> &GenerationParams {
        self.params.get(stage)
    }

    pub fn limits(&self) -> &PromptLimits {
        &self.limits
    }

    pub fn counter(&self) -> &Arc<dyn TokenCounter> {
        &self.counter
    }

    fn system(&self, stage: Stage) -> Result<String, PromptError> {
        let values = BTreeMap::from([
            ("method_definition", self.resources.method_definition.trim_end().to_string()),
            ("quality_checklist", self.resources.quality_checklist.trim_end().to_string()),
            (
                "output_format",
                self.resources.output_formats[&stage].trim_end().to_string(),
            ),
        ]);
        self.templates.get(stage).system.render(&values)
    }

    fn count(&self, s: &str) -> usize {
        self.counter.count(s)
    }

    fn finish(&self, stage: Stage, system: String, user: String) -> Result<Prompt, PromptError> {
        let params = self.params.get(stage);
        let needed = self.count(&system) + self.count(&user) + params.max_tokens;
        if needed > params.context_limit {
            return Err(PromptError::Overflow {
                stage,
                needed,
                limit: params.context_limit,
            });
        }
        Ok(Prompt { system, user })
    }

    fn clip_line(&self, s: &str) -> String {
        let flat = s.split_whitespace().collect::<Vec<_>>().join(" ");
        truncate_to_fit(self.counter.as_ref(), &flat, self.limits.line_allowance)
            .unwrap_or(flat)
    }

    /// Tokens reserved for a sampled list of `n` lines under `header`.
    fn list_reserve(&self, header: &str, n: usize) -> usize {
        if n == 0 {
            return 0;
        }
        self.count(header) + 1 + n * (self.limits.line_allowance + self.count("- \n"))
    }

    fn item_overhead<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> usize {
        ids.into_iter()
            .map(|id| {
                self.count(&format!("{ITEM_BEGIN}{id}{ITEM_CLOSE}\n"))
                    + self.count(&format!("\n{ITEM_END}{id}{ITEM_CLOSE}\n"))
            })
            .max()
            .unwrap_or(0)
    }

    /// Budget with `reserve` extra fixed tokens, capped so that one
    /// `per_reply`-token answer per item fits in the completion.
    fn budget(
        &self,
        stage: Stage,
        system: &str,
        user_skeleton: &str,
        reserve: usize,
        ids: &[&str],
        per_reply: impl Fn(&str) -> usize,
    ) -> Result<TokenBudget, PromptError> {
        let params = self.params.get(stage);
        let fixed = self.count(system) + self.count(user_skeleton) + reserve;
        let per_item = self.item_overhead(ids.iter().copied());
        let reply = ids.iter().map(|id| per_reply(id)).max().unwrap_or(0);
        Ok(TokenBudget::new(params.context_limit, params.max_tokens, fixed, per_item)?
            .with_reply_room(self.count("[]"), reply)?)
    }

    /// Tokens of one reply row `{"id": ..., field: value}` with an empty value.
    fn reply_row(&self, id: &str, field: &str, empty: &str) -> usize {
        self.count(&format!("{{\"id\": \"{id}\", \"{field}\": {empty}}}, "))
    }

    fn coding_values(&self, ctx: &AnalysisContext) -> BTreeMap<&'static str, String> {
        let rq = {
            let mut s = String::from("Research questions:\n");
            for (i, q) in ctx.research_questions.iter().enumerate() {
                let _ = writeln!(s, "{}. {q}", i + 1);
            }
            s.push('\n');
            s
        };
        BTreeMap::from([
            ("research_questions", rq),
            ("analysis_parameters", analysis_parameters(ctx)),
            (
                "custom_requirements",
                section("Custom requirements:", ctx.custom_requirements.iter().cloned()),
            ),
            (
                "exemplars",
                section(
                    "Examples of desirable initial codes:",
                    ctx.positive_exemplars.iter().cloned(),
                ),
            ),
            ("interim_codes", String::new()),
            ("items", String::new()),
        ])
    }

    /// Budget for coding batches: everything except the items is fixed, and
    /// room for a full interim sample is set aside.
    pub fn coding_budget<'a>(
        &self,
        ctx: &AnalysisContext,
        ids: impl IntoIterator<Item = &'a str>,
    ) -> Result<TokenBudget, PromptError> {
        let system = self.system(Stage::Coding)?;
        let mut values = self.coding_values(ctx);
        values.insert("items", "Data points:\n".into());
        let skeleton = self.templates.get(Stage::Coding).user.render(&values)?;
        let reserve = self.list_reserve(INTERIM_HEADER, self.limits.interim_sample_size);
        let ids: Vec<&str> = ids.into_iter().collect();
        let line = self.limits.line_allowance;
        self.budget(Stage::Coding, &system, &skeleton, reserve, &ids, |id| {
            self.reply_row(id, "code", "\"\"") + line
        })
    }

    pub fn build_coding(
        &self,
        batch: &Batch,
        ctx: &AnalysisContext,
        interim: &[InitialCode],
    ) -> Result<Prompt, PromptError> {
        if batch.items.is_empty() {
            return Err(PromptError::Precondition("empty batch".into()));
        }
        let system = self.system(Stage::Coding)?;
        let mut values = self.coding_values(ctx);
        values.insert(
            "interim_codes",
            section(INTERIM_HEADER, interim.iter().map(|c| self.clip_line(&c.code_text))),
        );
        values.insert("items", items_block(batch));
        let user = self.templates.get(Stage::Coding).user.render(&values)?;
        self.finish(Stage::Coding, system, user)
    }

    fn collation_values(&self, ctx: &AnalysisContext) -> BTreeMap<&'static str, String> {
        let mut v = self.coding_values(ctx);
        v.remove("custom_requirements");
        v.remove("exemplars");
        v.remove("interim_codes");
        v.insert("theme_specification", theme_spec(ctx));
        v.insert("carried_themes", String::new());
        v
    }

    pub fn collation_budget<'a>(
        &self,
        ctx: &AnalysisContext,
        ids: impl IntoIterator<Item = &'a str>,
    ) -> Result<TokenBudget, PromptError> {
        let system = self.system(Stage::Collation)?;
        let mut values = self.collation_values(ctx);
        values.insert("items", "Initial codes:\n".into());
        let skeleton = self.templates.get(Stage::Collation).user.render(&values)?;
        let reserve = self.list_reserve(CARRY_HEADER, self.limits.carry_size);
        let ids: Vec<&str> = ids.into_iter().collect();
        let line = self.limits.line_allowance;
        self.budget(Stage::Collation, &system, &skeleton, reserve, &ids, |id| {
            self.reply_row(id, "theme", "\"\"") + line
        })
    }

    /// `code_batch` items carry the code text of each data point.
    pub fn build_collation(
        &self,
        code_batch: &Batch,
        ctx: &AnalysisContext,
        carry: &[String],
    ) -> Result<Prompt, PromptError> {
        if code_batch.items.is_empty() {
            return Err(PromptError::Precondition("empty batch".into()));
        }
        if carry.len() > self.limits.carry_size {
            return Err(PromptError::CarryTooLarge {
                max: self.limits.carry_size,
                got: carry.len(),
            });
        }
        let system = self.system(Stage::Collation)?;
        let mut values = self.collation_values(ctx);
        values.insert(
            "carried_themes",
            section(CARRY_HEADER, carry.iter().map(|l| self.clip_line(l))),
        );
        let mut items = String::from("Initial codes:\n");
        for item in &code_batch.items {
            items.push_str(&render_item(&item.id, &item.text));
        }
        values.insert("items", items);
        let user = self.templates.get(Stage::Collation).user.render(&values)?;
        self.finish(Stage::Collation, system, user)
    }

    /// `candidates` are labels with the number of data points behind each.
    pub fn build_merge(
        &self,
        candidates: &[(String, usize)],
        ctx: &AnalysisContext,
    ) -> Result<Prompt, PromptError> {
        if candidates.is_empty() {
            return Err(PromptError::Precondition("no candidate themes".into()));
        }
        let system = self.system(Stage::Merge)?;
        let mut values = self.collation_values(ctx);
        values.remove("carried_themes");
        values.remove("items");
        values.insert("max_themes", self.limits.max_themes.to_string());
        let mut list = String::from("Candidate themes (number of data points in parentheses):\n");
        for (label, n) in candidates {
            let _ = writeln!(list, "- {label} ({n})");
        }
        values.insert("candidates", list);
        let user = self.templates.get(Stage::Merge).user.render(&values)?;
        match self.finish(Stage::Merge, system, user) {
            Err(PromptError::Overflow { needed, limit, .. }) => Err(PromptError::MergeTooLarge {
                count: candidates.len(),
                needed,
                limit,
            }),
            other => other,
        }
    }

    fn classification_values(&self, themes: &[String], k: usize) -> BTreeMap<&'static str, String> {
        let mut list = String::from("Themes:\n");
        for t in themes {
            let _ = writeln!(list, "- {t}");
        }
        list.push('\n');
        let instruction = if k == 1 {
            "For each data point give exactly one theme label, the best fitting one. Use no labels outside the list.\n\n".to_string()
        } else {
            format!(
                "For each data point give exactly {k} theme labels, ranked from the best to the least fitting, without repeating a label. Use no labels outside the list.\n\n"
            )
        };
        BTreeMap::from([
            ("themes", list),
            ("instruction", instruction),
            ("items", String::new()),
        ])
    }

    fn check_classification(themes: &[String], k: usize) -> Result<(), PromptError> {
        if themes.is_empty() {
            return Err(PromptError::Precondition("theme list is empty".into()));
        }
        if k == 0 || k > themes.len() {
            return Err(PromptError::Precondition(format!(
                "k must be between 1 and {} (the number of themes), got {k}",
                themes.len()
            )));
        }
        Ok(())
    }

    pub fn classification_budget<'a>(
        &self,
        themes: &[String],
        k: usize,
        ids: impl IntoIterator<Item = &'a str>,
    ) -> Result<TokenBudget, PromptError> {
        Self::check_classification(themes, k)?;
        let system = self.system(Stage::Classification)?;
        let mut values = self.classification_values(themes, k);
        values.insert("items", "Data points:\n".into());
        let skeleton = self.templates.get(Stage::Classification).user.render(&values)?;
        let ids: Vec<&str> = ids.into_iter().collect();
        let label = themes.iter().map(|t| self.count(&format!("\"{t}\", "))).max().unwrap_or(0);
        self.budget(Stage::Classification, &system, &skeleton, 0, &ids, |id| {
            self.reply_row(id, "themes", "[]") + k * label
        })
    }

    pub fn build_classification(
        &self,
        batch: &Batch,
        themes: &[String],
        k: usize,
    ) -> Result<Prompt, PromptError> {
        Self::check_classification(themes, k)?;
        if batch.items.is_empty() {
            return Err(PromptError::Precondition("empty batch".into()));
        }
        let system = self.system(Stage::Classification)?;
        let mut values = self.classification_values(themes, k);
        values.insert("items", items_block(batch));
        let user = self.templates.get(Stage::Classification).user.render(&values)?;
        self.finish(Stage::Classification, system, user)
    }
}

fn items_block(batch: &Batch) -> String {
    let mut s = String::from("Data points:\n");
    for item in &batch.items {
        s.push_str(&render_item(&item.id, &item.text));
    }
    s
}

fn analysis_parameters(ctx: &AnalysisContext) -> String {
    let mut s = String::from("Analysis parameters:\n");
    let _ = writeln!(
        s,
        "- Look for {} patterns.",
        ctx.analysis_kind.level
    );
    if !ctx.analysis_kind.focus.trim().is_empty() {
        let _ = writeln!(s, "- Focus: {}", ctx.analysis_kind.focus.trim());
    }
    s.push('\n');
    s
}

fn theme_spec(ctx: &AnalysisContext) -> String {
    if ctx.theme_specification.trim().is_empty() {
        String::new()
    } else {
        format!("What counts as a theme:\n{}\n\n", ctx.theme_specification.trim())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::{BatchItem, HeuristicCounter};

    fn builder() -> PromptBuilder {
        PromptBuilder::with_defaults(Arc::new(HeuristicCounter))
    }

    fn ctx() -> AnalysisContext {
        let mut c = AnalysisContext::new(vec!["What types of theft occur?".into()]).unwrap();
        c.custom_requirements = vec!["avoid multiplicity of the offense".into(), "second".into()];
        c
    }

    fn batch(items: &[(&str, &str)]) -> Batch {
        Batch {
            index: 0,
            items: items
                .iter()
                .map(|(id, text)| BatchItem {
                    id: id.to_string(),
                    text: text.to_string(),
                    truncated: false,
                })
                .collect(),
        }
    }

    fn code(id: &str, text: &str) -> InitialCode {
        InitialCode {
            data_point_id: id.into(),
            code_text: text.into(),
            round: 1,
        }
    }

    #[test]
    fn template_parsing() {
        let t = Template::parse("t", "a {x} {{literal}} {y_z}").unwrap();
        assert_eq!(t.placeholders(), BTreeSet::from(["x".to_string(), "y_z".to_string()]));
        let out = t
            .render(&BTreeMap::from([("x", "1".to_string()), ("y_z", "2".to_string())]))
            .unwrap();
        assert_eq!(out, "a 1 {literal} 2");
        assert!(Template::parse("t", "a {X}").is_err());
        assert!(Template::parse("t", "a {}").is_err());
        assert!(Template::parse("t", "a }").is_err());
        assert!(Template::parse("t", "a {x").is_err());
    }

    #[test]
    fn template_slots_must_match_stage() {
        let err = PromptTemplate::new(Stage::Classification, "{method_definition}{quality_checklist}{output_format}", "{themes}{items}").unwrap_err();
        assert!(err.to_string().contains("instruction"));
        assert!(PromptTemplate::new(Stage::Classification, "{method_definition}{quality_checklist}{output_format}", "{themes}{instruction}{items}{extra}").is_err());
    }

    #[test]
    fn coding_first_batch_has_no_interim_section() {
        let p = builder().build_coding(&batch(&[("a", "text a")]), &ctx(), &[]).unwrap();
        assert!(!p.user.contains(INTERIM_HEADER));
        let p = builder()
            .build_coding(&batch(&[("a", "text a")]), &ctx(), &[code("z", "earlier code")])
            .unwrap();
        assert!(p.user.contains(INTERIM_HEADER));
        assert!(p.user.contains("- earlier code"));
    }

    #[test]
    fn coding_user_message_order() {
        let p = builder()
            .build_coding(&batch(&[("a", "text a"), ("b", "text b")]), &ctx(), &[code("z", "earlier")])
            .unwrap();
        let pos = |s: &str| p.user.find(s).unwrap_or_else(|| panic!("{s} missing"));
        assert!(pos("What types of theft occur?") < pos("Analysis parameters"));
        assert!(pos("Analysis parameters") < pos("avoid multiplicity of the offense"));
        assert!(pos("avoid multiplicity of the offense") < pos("- second"));
        assert!(pos("- second") < pos(INTERIM_HEADER));
        assert!(pos(INTERIM_HEADER) < pos("<<<BEGIN id=a>>>"));
        assert_eq!(extract_item_ids(&p.user), ["a", "b"]);
        assert!(p.system.contains("Criteria for a good thematic analysis"));
        assert!(p.system.contains("\"code\""));
    }

    #[test]
    fn collation_carry_section_and_ids() {
        let codes = batch(&[("a", "shoplifting of food"), ("b", "pickpocketing on tram")]);
        let p = builder().build_collation(&codes, &ctx(), &[]).unwrap();
        assert!(!p.user.contains(CARRY_HEADER));
        assert!(!p.user.contains("avoid multiplicity"));
        let p = builder()
            .build_collation(&codes, &ctx(), &["retail theft".to_string()])
            .unwrap();
        assert!(p.user.find(CARRY_HEADER).unwrap() < p.user.find("<<<BEGIN id=a>>>").unwrap());
        let carry: Vec<String> = (0..21).map(|i| format!("t{i}")).collect();
        assert!(matches!(
            builder().build_collation(&codes, &ctx(), &carry),
            Err(PromptError::CarryTooLarge { max: 20, got: 21 })
        ));
    }

    #[test]
    fn most_frequent_ties_by_label() {
        let freq: BTreeMap<String, usize> =
            [("b", 2), ("a", 2), ("c", 5), ("d", 1)].iter().map(|(l, n)| (l.to_string(), *n)).collect();
        assert_eq!(most_frequent(&freq, 3), ["c", "a", "b"]);
        assert_eq!(most_frequent(&freq, 10).len(), 4);
    }

    #[test]
    fn merge_lists_every_candidate_with_frequency() {
        let cands: Vec<(String, usize)> = (0..30).map(|i| (format!("candidate {i}"), i + 1)).collect();
        let p = builder().build_merge(&cands, &ctx()).unwrap();
        for (l, n) in &cands {
            assert!(p.user.contains(&format!("- {l} ({n})\n")));
        }
        assert!(p.user.contains("at most 20 high-level themes"));
    }

    #[test]
    fn merge_too_large_is_explicit() {
        let cands: Vec<(String, usize)> = (0..3000).map(|i| (format!("a rather long candidate theme label number {i}"), 1)).collect();
        let err = builder().build_merge(&cands, &ctx()).unwrap_err();
        assert!(matches!(err, PromptError::MergeTooLarge { count: 3000, .. }));
        assert!(err.to_string().contains("approve-themes"));
    }

    #[test]
    fn classification_instruction_and_theme_order() {
        let themes: Vec<String> = (0..14).map(|i| format!("theme {i:02}")).collect();
        let b = batch(&[("a", "x")]);
        let p = builder().build_classification(&b, &themes, 3).unwrap();
        let mut last = 0;
        for t in &themes {
            let at = p.user.find(&format!("- {t}\n")).unwrap();
            assert!(at >= last);
            last = at;
        }
        assert!(p.user.contains("exactly 3 theme labels, ranked"));
        assert!(p.user.contains("no labels outside the list"));
        let p1 = builder().build_classification(&b, &themes, 1).unwrap();
        assert!(p1.user.contains("exactly one theme label"));
        assert!(builder().build_classification(&b, &themes, 15).is_err());
        assert!(builder().build_classification(&b, &[], 1).is_err());
    }

    #[test]
    fn assembly_is_pure() {
        let b = batch(&[("a", "x"), ("b", "y")]);
        let one = builder().build_coding(&b, &ctx(), &[code("q", "c")]).unwrap();
        let two = builder().build_coding(&b, &ctx(), &[code("q", "c")]).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn budgets_leave_room_for_items() {
        let b = builder();
        let budget = b.coding_budget(&ctx(), ["a", "bb"]).unwrap();
        assert!(budget.content_capacity() > 4000);
        assert_eq!(budget.completion_reserve, 2000);
        let cb = b.classification_budget(&["x".to_string()], 1, ["a"]).unwrap();
        assert_eq!(cb.completion_reserve, 1500);
    }

    #[test]
    fn overrides_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("quality_checklist.txt"), "my checklist").unwrap();
        let r = GeneralResources::load_dir(dir.path()).unwrap();
        assert_eq!(r.quality_checklist, "my checklist");
        std::fs::write(dir.path().join("classification.user.txt"), "{themes}{instruction}{items}\nCustom wording.").unwrap();
        let t = Templates::load_dir(dir.path()).unwrap();
        let pb = PromptBuilder::new(r, t, Arc::new(HeuristicCounter), StageParams::default(), PromptLimits::default()).unwrap();
        let p = pb.build_classification(&batch(&[("a", "x")]), &["T".to_string()], 1).unwrap();
        assert!(p.user.ends_with("Custom wording."));
        assert!(p.system.contains("my checklist"));
        std::fs::write(dir.path().join("merge.user.txt"), "{candidates}").unwrap();
        assert!(Templates::load_dir(dir.path()).is_err());
    }
}
