//! Synthetic corpus with planted themes and a matching scripted backend.
//!
//! Used by tests, benchmarks and demos: running the whole pipeline against
//! [`Scenario::script`] recovers the planted themes exactly.

use std::collections::BTreeMap;

use serde_json::{json, Value};

use crate::domain::{AnalysisContext, DataPoint, Dataset, HighLevelTheme, ThemeSet};
use crate::gateway::{IdTable, Script, ScriptEntry};
use crate::prompt::{PromptLimits, StageParams};
use crate::run::RunSettings;

struct Planted {
    label: &'static str,
    candidates: [&'static str; 2],
    places: [&'static str; 5],
    items: [&'static str; 5],
    action: &'static str,
    code: &'static str,
}

const PLANTED: [Planted; 3] = [
    Planted {
        label: "Shoplifting",
        candidates: ["theft from shops", "retail theft"],
        places: ["supermarket", "pharmacy", "clothing store", "electronics shop", "bookshop"],
        items: ["bottles of spirits", "cosmetics", "a jacket", "headphones", "two novels"],
        action: "hid {item} under a coat in the {place} and walked past the till without paying",
        code: "concealed {item} in a {place} and left without paying",
    },
    Planted {
        label: "Burglary",
        candidates: ["breaking into homes", "burglary of business premises"],
        places: ["family house", "garden shed", "office", "garage", "basement storage room"],
        items: ["jewellery", "power tools", "a laptop", "a bicycle", "cash"],
        action: "forced the door of a {place} at night and carried away {item}",
        code: "broke into a {place} and took {item}",
    },
    Planted {
        label: "Vehicle theft",
        candidates: ["car theft", "theft of vehicle parts"],
        places: ["parking lot", "residential street", "car dealership", "underground garage", "petrol station"],
        items: ["a passenger car", "catalytic converters", "a motorcycle", "wheels and tyres", "a van"],
        action: "broke a window in the {place}, disabled the lock and removed {item}",
        code: "forced entry into a vehicle at a {place} and removed {item}",
    },
];

const FILLER: &str = "The court heard the witnesses and reviewed the camera footage. ";

/// A corpus, its analysis context, and a script that answers every stage.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub dataset: Dataset,
    pub context: AnalysisContext,
    pub settings: RunSettings,
    /// The planted theme labels, which are also the gold labels.
    pub themes: Vec<String>,
    /// Planted theme of every id.
    pub planted: BTreeMap<String, String>,
    codes: BTreeMap<String, String>,
    candidates: BTreeMap<String, String>,
}

impl Scenario {
    /// `per_theme` documents for each of the three planted themes, interleaved.
    pub fn new(per_theme: usize) -> Self {
        let mut points = Vec::new();
        let mut planted = BTreeMap::new();
        let mut codes = BTreeMap::new();
        let mut candidates = BTreeMap::new();
        for i in 0..per_theme {
            for (t, p) in PLANTED.iter().enumerate() {
                let n = i * PLANTED.len() + t + 1;
                let id = format!("doc-{n:03}");
                let place = p.places[i % p.places.len()];
                let item = p.items[(i + t) % p.items.len()];
                let fill = |s: &str| s.replace("{place}", place).replace("{item}", item);
                let text = format!(
                    "Case {n}. The accused {}. {}",
                    fill(p.action),
                    FILLER.repeat(1 + (n * 7) % 5)
                );
                points.push(DataPoint {
                    id: id.clone(),
                    text: text.trim_end().to_string(),
                    gold_theme: Some(p.label.to_string()),
                });
                planted.insert(id.clone(), p.label.to_string());
                codes.insert(id.clone(), fill(p.code));
                candidates.insert(id, p.candidates[i % 2].to_string());
            }
        }
        let mut context =
            AnalysisContext::new(vec!["What kinds of theft are described in the cases?".into()])
                .expect("non-empty question");
        context.analysis_kind.focus = "how the offence was committed and what was taken".into();
        Self {
            dataset: Dataset::new("synthetic-theft", points).expect("valid synthetic dataset"),
            context,
            settings: small_settings(),
            themes: PLANTED.iter().map(|p| p.label.to_string()).collect(),
            planted,
            codes,
            candidates,
        }
    }

    /// The default 30-document scenario.
    pub fn golden() -> Self {
        Self::new(10)
    }

    /// Replaces every gold label, keeping the planted structure.
    pub fn with_gold(mut self, relabel: impl Fn(&str, &str) -> String) -> Self {
        let points = self
            .dataset
            .points()
            .iter()
            .map(|p| DataPoint {
                gold_theme: p.gold_theme.as_ref().map(|g| relabel(&p.id, g)),
                ..p.clone()
            })
            .collect();
        self.dataset = Dataset::new(self.dataset.name(), points).expect("same ids and texts");
        self
    }

    pub fn theme_set(&self) -> ThemeSet {
        ThemeSet {
            themes: PLANTED
                .iter()
                .map(|p| HighLevelTheme {
                    label: p.label.to_string(),
                    sub_themes: p.candidates.iter().map(|c| c.to_string()).collect(),
                })
                .collect(),
        }
    }

    /// Ranked classification answer for `id`; the planted theme first unless
    /// `id` is in `misses`, in which case it comes second.
    fn ranking(&self, id: &str, misses: &[&str]) -> Value {
        let gold = &self.planted[id];
        let mut others: Vec<&String> = self.themes.iter().filter(|t| *t != gold).collect();
        others.sort();
        let mut ranked: Vec<&String> = vec![gold];
        ranked.extend(others);
        if misses.contains(&id) {
            ranked.swap(0, 1);
        }
        json!(ranked)
    }

    /// Script answering every stage consistently with the planted themes.
    pub fn script(&self) -> Script {
        self.script_with_misses(&[])
    }

    /// As [`Scenario::script`], but the listed ids get their planted theme at
    /// rank 2 instead of rank 1.
    pub fn script_with_misses(&self, misses: &[&str]) -> Script {
        let table = |field: &str, values: BTreeMap<String, Value>| IdTable {
            field: field.into(),
            values,
            template: None,
        };
        let codes = self.codes.iter().map(|(id, c)| (id.clone(), json!(c))).collect();
        let cands = self.candidates.iter().map(|(id, c)| (id.clone(), json!(c))).collect();
        let ranks = self.planted.keys().map(|id| (id.clone(), self.ranking(id, misses))).collect();
        let merge: Vec<Value> = self
            .theme_set()
            .themes
            .iter()
            .map(|t| json!({"theme": t.label, "sub_themes": t.sub_themes}))
            .collect();
        Script {
            name: "synthetic-theft".into(),
            ..Script::default()
        }
        .table("coding", table("code", codes))
        .table("collation", table("theme", cands))
        .table("classification", table("themes", ranks))
        .respond("merge", ScriptEntry::text(Value::Array(merge).to_string()))
    }
}

/// Small context windows, so the synthetic corpus spans several batches in
/// every batched stage.
fn small_settings() -> RunSettings {
    let mut params = StageParams::default();
    for (p, window, completion) in [
        (&mut params.coding, 2200, 400),
        (&mut params.collation, 1800, 400),
        (&mut params.merge, 2600, 600),
        (&mut params.classification, 1600, 400),
    ] {
        p.context_limit = window;
        p.max_tokens = completion;
    }
    RunSettings {
        seed: 7,
        k: 3,
        parallelism: 4,
        params,
        limits: PromptLimits {
            interim_sample_size: 5,
            carry_size: 20,
            line_allowance: 20,
            max_themes: 20,
        },
        ..RunSettings::default()
    }
}
