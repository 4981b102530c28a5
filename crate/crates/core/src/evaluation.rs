//! Recall at k, initial-code quality tallies and gold-vs-auto theme mapping.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{label_key, QualityAnnotation, ThemeAssignment, Verdict};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("data point {0} has a gold theme but no assignment")]
    MissingAssignment(String),
    #[error("data point {0} is assigned but has no gold theme")]
    MissingGold(String),
    #[error("data point {0} is assigned more than once")]
    DuplicateAssignment(String),
    #[error("data point {id} has {len} ranked theme(s), fewer than k = {k}")]
    ShortRanking { id: String, len: usize, k: usize },
    #[error("data point {id} is annotated twice in round {round}")]
    DuplicateAnnotation { id: String, round: u32 },
    #[error("nothing to evaluate: no gold themes")]
    NoGold,
}

/// Label of the row collecting gold themes missing from the theme list.
pub const RESIDUAL_LABEL: &str = "(not in theme list)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub theme: String,
    pub support: usize,
    pub hits_at_1: usize,
    pub hits_at_k: usize,
    pub r_at_1: f64,
    pub r_at_k: f64,
}

impl RecallRow {
    fn new(theme: String, support: usize, hits_at_1: usize, hits_at_k: usize) -> Self {
        let ratio = |h: usize| if support == 0 { 0.0 } else { h as f64 / support as f64 };
        Self {
            theme,
            support,
            hits_at_1,
            hits_at_k,
            r_at_1: ratio(hits_at_1),
            r_at_k: ratio(hits_at_k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub k: usize,
    /// One row per gold theme, in theme-list order when a list is given.
    pub per_theme: Vec<RecallRow>,
    /// Gold themes outside the theme list, pooled.
    pub residual: Option<RecallRow>,
    pub overall: RecallRow,
}

/// Recall at 1 and at `k` of `assignments` against `gold` (id → label).
/// Labels are compared with [`label_key`]. With `themes`, rows follow the
/// list and gold labels outside it go to the residual row; without, there is
/// one row per distinct gold label.
pub fn recall_at_k(
    assignments: &[ThemeAssignment],
    gold: &BTreeMap<String, String>,
    k: usize,
    themes: Option<&[String]>,
) -> Result<RecallReport, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if gold.is_empty() {
        return Err(EvalError::NoGold);
    }
    let mut ranked: HashMap<&str, &[String]> = HashMap::with_capacity(assignments.len());
    for a in assignments {
        if ranked.insert(&a.data_point_id, &a.ranked_themes).is_some() {
            return Err(EvalError::DuplicateAssignment(a.data_point_id.clone()));
        }
    }

    // row key -> display label, in output order
    let mut rows: Vec<(String, String)> = Vec::new();
    match themes {
        Some(list) => {
            for t in list {
                let key = label_key(t);
                if !rows.iter().any(|(k, _)| *k == key) {
                    rows.push((key, t.clone()));
                }
            }
        }
        None => {
            let mut seen = BTreeMap::new();
            for g in gold.values() {
                seen.entry(label_key(g)).or_insert_with(|| g.clone());
            }
            rows.extend(seen);
        }
    }
    let row_index: HashMap<&str, usize> = rows.iter().enumerate().map(|(i, (k, _))| (k.as_str(), i)).collect();

    let mut counts = vec![(0usize, 0usize, 0usize); rows.len()];
    let mut residual = (0usize, 0usize, 0usize);
    for (id, g) in gold {
        let list = ranked
            .get(id.as_str())
            .ok_or_else(|| EvalError::MissingAssignment(id.clone()))?;
        if list.len() < k {
            return Err(EvalError::ShortRanking {
                id: id.clone(),
                len: list.len(),
                k,
            });
        }
        let key = label_key(g);
        let at1 = label_key(&list[0]) == key;
        let atk = list[..k].iter().any(|l| label_key(l) == key);
        let slot = match row_index.get(key.as_str()) {
            Some(&i) => &mut counts[i],
            None => &mut residual,
        };
        slot.0 += 1;
        slot.1 += usize::from(at1);
        slot.2 += usize::from(atk);
    }

    let per_theme: Vec<RecallRow> = rows
        .into_iter()
        .zip(&counts)
        .filter(|(_, c)| c.0 > 0)
        .map(|((_, label), c)| RecallRow::new(label, c.0, c.1, c.2))
        .collect();
    let total = counts.iter().fold(residual, |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    Ok(RecallReport {
        k,
        per_theme,
        residual: (residual.0 > 0).then(|| RecallRow::new(RESIDUAL_LABEL.into(), residual.0, residual.1, residual.2)),
        overall: RecallRow::new("overall".into(), total.0, total.1, total.2),
    })
}

impl RecallReport {
    pub fn to_text(&self) -> String {
        let rows: Vec<&RecallRow> = self
            .per_theme
            .iter()
            .chain(self.residual.as_ref())
            .chain(std::iter::once(&self.overall))
            .collect();
        let width = rows.iter().map(|r| r.theme.chars().count()).max().unwrap_or(0).max(5);
        let rk = format!("R@{}", self.k);
        let mut out = format!("{:<width$}  {:>7}  {:>6}  {:>6}\n", "theme", "support", "R@1", rk);
        for r in rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7}  {:>6.3}  {:>6.3}",
                r.theme, r.support, r.r_at_1, r.r_at_k
            );
        }
        out
    }
}

/// A percentage held as an integer number of tenths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "f64", try_from = "f64")]
pub struct Percent(pub u32);

impl Percent {
    /// `count / total` in percent, rounded half-up to one decimal.
    pub fn of(count: usize, total: usize) -> Self {
        if total == 0 {
            return Percent(0);
        }
        let tenths = (2 * count as u128 * 1000 + total as u128) / (2 * total as u128);
        Percent(tenths as u32)
    }

    pub fn value(self) -> f64 {
        f64::from(self.0) / 10.0
    }
}

impl From<Percent> for f64 {
    fn from(p: Percent) -> f64 {
        p.value()
    }
}

impl TryFrom<f64> for Percent {
    type Error = String;

    fn try_from(v: f64) -> Result<Self, String> {
        if !(0.0..=100.0).contains(&v) {
            return Err(format!("percentage out of range: {v}"));
        }
        Ok(Percent((v * 10.0).round() as u32))
    }
}

impl std::fmt::Display for Percent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}", self.0 / 10, self.0 % 10)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictCount {
    pub count: usize,
    pub percent: Percent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityTally {
    pub total: usize,
    pub not_how: VerdictCount,
    pub not_what: VerdictCount,
    pub ok: VerdictCount,
    /// `100 - ok`, so the two always sum to exactly 100.
    pub not_ok_percent: Percent,
    /// Set when there was nothing to tally; all percentages are then 0.
    pub empty: bool,
}

impl QualityTally {
    pub fn from_counts(not_how: usize, not_what: usize, ok: usize) -> Self {
        let total = not_how + not_what + ok;
        let vc = |count| VerdictCount {
            count,
            percent: Percent::of(count, total),
        };
        let ok = vc(ok);
        Self {
            total,
            not_how: vc(not_how),
            not_what: vc(not_what),
            ok,
            not_ok_percent: if total == 0 { Percent(0) } else { Percent(1000 - ok.percent.0) },
            empty: total == 0,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<8}  {:>6}  {:>6}\n", "verdict", "count", "%");
        for (name, v) in [("not how", self.not_how), ("not what", self.not_what), ("ok", self.ok)] {
            let _ = writeln!(out, "{:<8}  {:>6}  {:>6}", name, v.count, v.percent.to_string());
        }
        let _ = writeln!(
            out,
            "{:<8}  {:>6}  {:>6}",
            "not ok",
            self.not_how.count + self.not_what.count,
            self.not_ok_percent.to_string()
        );
        let _ = writeln!(out, "{:<8}  {:>6}", "total", self.total);
        out
    }
}

/// Counts verdicts. Each (data point, round) may be annotated once.
pub fn tally_quality(annotations: &[QualityAnnotation]) -> Result<QualityTally, EvalError> {
    let mut seen = BTreeSet::new();
    let mut counts = [0usize; 3];
    for a in annotations {
        if !seen.insert((a.data_point_id.as_str(), a.round)) {
            return Err(EvalError::DuplicateAnnotation {
                id: a.data_point_id.clone(),
                round: a.round,
            });
        }
        counts[match a.verdict {
            Verdict::NotHow => 0,
            Verdict::NotWhat => 1,
            Verdict::Ok => 2,
        }] += 1;
    }
    Ok(QualityTally::from_counts(counts[0], counts[1], counts[2]))
}

/// One tally per annotated round.
pub fn tally_by_round(annotations: &[QualityAnnotation]) -> Result<BTreeMap<u32, QualityTally>, EvalError> {
    let mut rounds: BTreeMap<u32, Vec<QualityAnnotation>> = BTreeMap::new();
    for a in annotations {
        rounds.entry(a.round).or_default().push(a.clone());
    }
    rounds
        .into_iter()
        .map(|(r, list)| Ok((r, tally_quality(&list)?)))
        .collect()
}

/// Cross-tabulation of gold themes (rows) against top-ranked automatic
/// themes (columns).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingMatrix {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub cells: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flow {
    pub source: String,
    pub target: String,
    pub weight: usize,
}

/// Builds the mapping from each data point's gold theme to its top-ranked
/// theme. Both labelings must cover the same ids.
pub fn theme_mapping(
    assignments: &[ThemeAssignment],
    gold: &BTreeMap<String, String>,
) -> Result<MappingMatrix, EvalError> {
    let mut auto: BTreeMap<&str, &str> = BTreeMap::new();
    for a in assignments {
        let top = a.ranked_themes.first().ok_or_else(|| EvalError::ShortRanking {
            id: a.data_point_id.clone(),
            len: 0,
            k: 1,
        })?;
        if auto.insert(&a.data_point_id, top).is_some() {
            return Err(EvalError::DuplicateAssignment(a.data_point_id.clone()));
        }
    }
    for id in gold.keys() {
        if !auto.contains_key(id.as_str()) {
            return Err(EvalError::MissingAssignment(id.clone()));
        }
    }
    if let Some(id) = auto.keys().find(|id| !gold.contains_key(**id)) {
        return Err(EvalError::MissingGold(id.to_string()));
    }
    let rows: Vec<String> = gold.values().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let columns: Vec<String> = auto.values().map(|s| s.to_string()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut cells = vec![vec![0; columns.len()]; rows.len()];
    for (id, g) in gold {
        let r = rows.binary_search(g).expect("row exists");
        let c = columns.binary_search_by(|c| c.as_str().cmp(auto[id.as_str()])).expect("column exists");
        cells[r][c] += 1;
    }
    Ok(MappingMatrix { rows, columns, cells })
}

impl MappingMatrix {
    pub fn total(&self) -> usize {
        self.cells.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.cells.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn get(&self, row: &str, column: &str) -> usize {
        match (
            self.rows.iter().position(|r| r == row),
            self.columns.iter().position(|c| c == column),
        ) {
            (Some(r), Some(c)) => self.cells[r][c],
            _ => 0,
        }
    }

    /// Non-zero cells as weighted edges, row-major.
    pub fn flows(&self) -> Vec<Flow> {
        let mut out = Vec::new();
        for (r, row) in self.rows.iter().enumerate() {
            for (c, col) in self.columns.iter().enumerate() {
                if self.cells[r][c] > 0 {
                    out.push(Flow {
                        source: row.clone(),
                        target: col.clone(),
                        weight: self.cells[r][c],
                    });
                }
            }
        }
        out
    }

    /// `source,target,weight` CSV of [`MappingMatrix::flows`].
    pub fn flows_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for f in self.flows() {
            w.serialize(&f).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
    }

    pub fn to_text(&self) -> String {
        let head = self.rows.iter().map(|r| r.chars().count()).max().unwrap_or(0).max(4);
        let widths: Vec<usize> = self.columns.iter().map(|c| c.chars().count().max(3)).collect();
        let mut out = format!("{:<head$}", "gold");
        for (c, w) in self.columns.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
        for (r, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{row:<head$}");
            for (c, w) in widths.iter().enumerate() {
                let _ = write!(out, "  {:>w$}", self.cells[r][c]);
            }
            out.push('\n');
        }
        out
    }
}
