//! Core vocabulary: datasets, analysis context, codes, themes, assignments
//! and quality annotations.
//!
//! Everything here is an immutable value once constructed. Theme labels are
//! compared through [`label_key`], never by raw string equality.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

/// One unit of analysis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPoint {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_theme: Option<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DatasetError {
    #[error("dataset is empty")]
    Empty,
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: empty id")]
    EmptyId { line: usize },
    #[error("line {line}: id {id:?} contains whitespace or \">>>\"")]
    InvalidId { line: usize, id: String },
    #[error("line {line}: record {id:?} has empty text")]
    EmptyText { line: usize, id: String },
    #[error("line {line}: duplicate id {id:?} (first seen on line {first_line})")]
    DuplicateId {
        id: String,
        line: usize,
        first_line: usize,
    },
    #[error("failed to read dataset: {0}")]
    Io(String),
}

/// Ids are embedded in prompt delimiters, so they must be single tokens.
fn valid_id(id: &str) -> bool {
    !id.chars().any(char::is_whitespace) && !id.contains(">>>")
}

/// An ordered, non-empty collection of data points with unique ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    name: String,
    points: Vec<DataPoint>,
}

/// Character-length summary of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LengthStats {
    pub min: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, points: Vec<DataPoint>) -> Result<Self, DatasetError> {
        if points.is_empty() {
            return Err(DatasetError::Empty);
        }
        let mut seen: HashMap<&str, usize> = HashMap::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            let line = i + 1;
            if p.id.is_empty() {
                return Err(DatasetError::EmptyId { line });
            }
            if !valid_id(&p.id) {
                return Err(DatasetError::InvalidId {
                    line,
                    id: p.id.clone(),
                });
            }
            if p.text.trim().is_empty() {
                return Err(DatasetError::EmptyText {
                    line,
                    id: p.id.clone(),
                });
            }
            if let Some(first) = seen.insert(&p.id, line) {
                return Err(DatasetError::DuplicateId {
                    id: p.id.clone(),
                    line,
                    first_line: first,
                });
            }
        }
        Ok(Self {
            name: name.into(),
            points,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn points(&self) -> &[DataPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&DataPoint> {
        self.points.iter().find(|p| p.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.points.iter().map(|p| p.id.as_str())
    }

    /// Gold labels of the points that carry one.
    pub fn gold(&self) -> BTreeMap<String, String> {
        self.points
            .iter()
            .filter_map(|p| p.gold_theme.as_ref().map(|g| (p.id.clone(), g.clone())))
            .collect()
    }

    /// Lengths in Unicode scalar values. Quartiles use linear interpolation
    /// between order statistics.
    pub fn length_stats(&self) -> LengthStats {
        let mut lens: Vec<usize> = self.points.iter().map(|p| p.text.chars().count()).collect();
        lens.sort_unstable();
        let quantile = |q: f64| {
            let pos = q * (lens.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = pos - lo as f64;
            lens[lo] as f64 + (lens[hi] as f64 - lens[lo] as f64) * frac
        };
        LengthStats {
            min: lens[0],
            q1: quantile(0.25),
            median: quantile(0.5),
            q3: quantile(0.75),
            max: lens[lens.len() - 1],
        }
    }

    /// Serializes back to the line-delimited ingestion format.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.points {
            out.push_str(&serde_json::to_string(p).expect("data point serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    text: String,
    #[serde(default)]
    gold_theme: Option<String>,
}

/// Reads one JSON object per line. Blank lines are skipped but still counted
/// for error positions.
pub fn parse_dataset<R: BufRead>(name: &str, reader: R) -> Result<Dataset, DatasetError> {
    let mut points = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| DatasetError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        if rec.id.is_empty() {
            return Err(DatasetError::EmptyId { line: line_no });
        }
        if !valid_id(&rec.id) {
            return Err(DatasetError::InvalidId {
                line: line_no,
                id: rec.id,
            });
        }
        if rec.text.trim().is_empty() {
            return Err(DatasetError::EmptyText {
                line: line_no,
                id: rec.id,
            });
        }
        if let Some(&first_line) = seen.get(&rec.id) {
            return Err(DatasetError::DuplicateId {
                id: rec.id,
                line: line_no,
                first_line,
            });
        }
        seen.insert(rec.id.clone(), line_no);
        points.push(DataPoint {
            id: rec.id,
            text: rec.text,
            gold_theme: rec.gold_theme.filter(|g| !g.trim().is_empty()),
        });
    }
    if points.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok(Dataset {
        name: name.to_string(),
        points,
    })
}

/// Canonical comparison key for a theme label: NFC, lowercase, internal
/// whitespace collapsed to single spaces, trimmed.
pub fn label_key(label: &str) -> String {
    let nfc: String = label.nfc().collect();
    let lowered = nfc.to_lowercase();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternLevel {
    #[default]
    Semantic,
    Latent,
}

impl fmt::Display for PatternLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatternLevel::Semantic => f.write_str("semantic"),
            PatternLevel::Latent => f.write_str("latent"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AnalysisKind {
    #[serde(default)]
    pub level: PatternLevel,
    /// Topical focus of the analysis, free text.
    #[serde(default)]
    pub focus: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContextError {
    #[error("analysis context needs at least one research question")]
    NoResearchQuestion,
}

/// Context-specific resources of one analysis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisContext {
    pub research_questions: Vec<String>,
    #[serde(default)]
    pub analysis_kind: AnalysisKind,
    #[serde(default)]
    pub theme_specification: String,
    #[serde(default)]
    pub custom_requirements: Vec<String>,
    #[serde(default)]
    pub positive_exemplars: Vec<String>,
}

impl AnalysisContext {
    pub fn new(research_questions: Vec<String>) -> Result<Self, ContextError> {
        let ctx = Self {
            research_questions,
            analysis_kind: AnalysisKind::default(),
            theme_specification: String::new(),
            custom_requirements: Vec::new(),
            positive_exemplars: Vec::new(),
        };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn validate(&self) -> Result<(), ContextError> {
        if self.research_questions.iter().all(|q| q.trim().is_empty()) {
            return Err(ContextError::NoResearchQuestion);
        }
        Ok(())
    }

    /// True when `self` can follow `earlier` in a run: requirements and
    /// exemplars only ever grow at the end.
    pub fn extends(&self, earlier: &AnalysisContext) -> bool {
        self.custom_requirements.starts_with(&earlier.custom_requirements)
            && self.positive_exemplars.starts_with(&earlier.positive_exemplars)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitialCode {
    pub data_point_id: String,
    pub code_text: String,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PotentialTheme {
    pub label: String,
    pub member_ids: BTreeSet<String>,
}

/// A high-level theme and the candidate themes grouped under it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HighLevelTheme {
    pub label: String,
    pub sub_themes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ThemeSet {
    pub themes: Vec<HighLevelTheme>,
}

impl ThemeSet {
    pub fn labels(&self) -> Vec<String> {
        self.themes.iter().map(|t| t.label.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.themes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.themes.is_empty()
    }

    /// A flat theme list given up front, each theme its own only sub-theme.
    pub fn flat(labels: &[String]) -> Self {
        Self {
            themes: labels
                .iter()
                .map(|l| HighLevelTheme {
                    label: l.clone(),
                    sub_themes: vec![l.clone()],
                })
                .collect(),
        }
    }
}

/// Everything wrong with a theme set relative to its candidate labels.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ThemeSetViolations {
    /// Candidates placed under no theme.
    pub missing: Vec<String>,
    /// Candidates placed more than once, with every theme that claims them.
    pub duplicates: Vec<(String, Vec<String>)>,
    /// Sub-theme labels that are not candidates.
    pub unknown: Vec<String>,
    /// High-level themes without sub-themes.
    pub empty_themes: Vec<String>,
    /// High-level labels used more than once.
    pub repeated_themes: Vec<String>,
}

impl ThemeSetViolations {
    pub fn is_empty(&self) -> bool {
        self.missing.is_empty()
            && self.duplicates.is_empty()
            && self.unknown.is_empty()
            && self.empty_themes.is_empty()
            && self.repeated_themes.is_empty()
    }
}

impl fmt::Display for ThemeSetViolations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if !self.missing.is_empty() {
            parts.push(format!("candidates not placed: {}", quoted(&self.missing)));
        }
        for (label, owners) in &self.duplicates {
            parts.push(format!(
                "candidate {label:?} placed under several themes: {}",
                quoted(owners)
            ));
        }
        if !self.unknown.is_empty() {
            parts.push(format!("unknown sub-themes: {}", quoted(&self.unknown)));
        }
        if !self.empty_themes.is_empty() {
            parts.push(format!("themes without sub-themes: {}", quoted(&self.empty_themes)));
        }
        if !self.repeated_themes.is_empty() {
            parts.push(format!("repeated theme labels: {}", quoted(&self.repeated_themes)));
        }
        f.write_str(&parts.join("; "))
    }
}

fn quoted(items: &[String]) -> String {
    items
        .iter()
        .map(|s| format!("{s:?}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Checks that `ts` partitions `candidates` exactly (labels compared by
/// [`label_key`]).
pub fn validate_theme_set(ts: &ThemeSet, candidates: &[String]) -> Result<(), ThemeSetViolations> {
    let candidate_keys: BTreeMap<String, &String> =
        candidates.iter().map(|c| (label_key(c), c)).collect();
    let mut placements: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut v = ThemeSetViolations::default();
    let mut theme_keys = BTreeSet::new();

    for theme in &ts.themes {
        if !theme_keys.insert(label_key(&theme.label)) {
            v.repeated_themes.push(theme.label.clone());
        }
        if theme.sub_themes.is_empty() {
            v.empty_themes.push(theme.label.clone());
        }
        for sub in &theme.sub_themes {
            let key = label_key(sub);
            if candidate_keys.contains_key(&key) {
                placements.entry(key).or_default().push(theme.label.clone());
            } else {
                v.unknown.push(sub.clone());
            }
        }
    }
    for (key, original) in &candidate_keys {
        match placements.get(key) {
            None => v.missing.push((*original).clone()),
            Some(owners) if owners.len() > 1 => {
                v.duplicates.push(((*original).clone(), owners.clone()))
            }
            Some(_) => {}
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThemeAssignment {
    pub data_point_id: String,
    pub ranked_themes: Vec<String>,
}

/// Outcome of the how/what quality check on one initial code. The checks are
/// applied in order and stop at the first failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// The code does not say how the act happened.
    NotHow,
    /// The code does not say what was targeted.
    NotWhat,
    Ok,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityAnnotation {
    pub data_point_id: String,
    pub round: u32,
    pub verdict: Verdict,
}

/// Pipeline stages that talk to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Coding,
    Collation,
    Merge,
    Classification,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::Coding,
        Stage::Collation,
        Stage::Merge,
        Stage::Classification,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Coding => "coding",
            Stage::Collation => "collation",
            Stage::Merge => "merge",
            Stage::Classification => "classification",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coding" | "code" => Ok(Stage::Coding),
            "collation" | "collate" => Ok(Stage::Collation),
            "merge" => Ok(Stage::Merge),
            "classification" | "classify" => Ok(Stage::Classification),
            other => Err(format!("unknown stage {other:?}")),
        }
    }
}

pub const DEFAULT_CONTEXT_LIMIT: usize = 8192;

#[derive(Debug, Error, PartialEq)]
pub enum ParamsError {
    #[error("max_tokens must be in (0, {context_limit}), got {max_tokens}")]
    MaxTokens {
        max_tokens: usize,
        context_limit: usize,
    },
    #[error("{name} out of range: {value}")]
    OutOfRange { name: &'static str, value: f64 },
}

/// Sampling and length settings sent with every completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub frequency_penalty: f64,
    pub presence_penalty: f64,
    pub max_tokens: usize,
    pub context_limit: usize,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            frequency_penalty: 0.0,
            presence_penalty: 0.0,
            max_tokens: 2000,
            context_limit: DEFAULT_CONTEXT_LIMIT,
        }
    }
}

impl GenerationParams {
    pub fn with_max_tokens(max_tokens: usize) -> Self {
        Self {
            max_tokens,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ParamsError> {
        if self.max_tokens == 0 || self.max_tokens >= self.context_limit {
            return Err(ParamsError::MaxTokens {
                max_tokens: self.max_tokens,
                context_limit: self.context_limit,
            });
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ParamsError::OutOfRange {
                name: "temperature",
                value: self.temperature,
            });
        }
        if !(0.0..=1.0).contains(&self.top_p) || self.top_p == 0.0 {
            return Err(ParamsError::OutOfRange {
                name: "top_p",
                value: self.top_p,
            });
        }
        for (name, value) in [
            ("frequency_penalty", self.frequency_penalty),
            ("presence_penalty", self.presence_penalty),
        ] {
            if !(-2.0..=2.0).contains(&value) {
                return Err(ParamsError::OutOfRange { name, value });
            }
        }
        Ok(())
    }
}
