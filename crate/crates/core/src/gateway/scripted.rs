//! Deterministic backend that answers from a script instead of a model.
//!
//! Lookup order for a call tagged `(stage, round, batch)`:
//!
//! 1. `responses["<stage>#<round>:<batch>"]`
//! 2. `responses["<stage>:<batch>"]`
//! 3. `responses["<stage>#<round>"]`, then `responses["<stage>"]`
//! 4. `tables["<stage>#<round>"]`, then `tables["<stage>"]`: the item ids
//!    found in the user message are answered from a per-id table
//! 5. `default`
//!
//! A response entry is a string, a fault object such as
//! `{"error": "transport"}`, or a list of those consumed one per call with
//! the last one repeating.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendCall, BackendError, BackendReply, ChatBackend, TokenUsage};
use crate::prompt::extract_item_ids;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    Transport,
    RateLimit,
    ContextOverflow,
    Fatal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptStep {
    Text(String),
    Fault {
        error: FaultKind,
        #[serde(default)]
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptEntry {
    One(ScriptStep),
    Sequence(Vec<ScriptStep>),
}

impl ScriptEntry {
    pub fn text(s: impl Into<String>) -> Self {
        ScriptEntry::One(ScriptStep::Text(s.into()))
    }

    pub fn sequence<I, S>(steps: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptEntry::Sequence(steps.into_iter().map(|s| ScriptStep::Text(s.into())).collect())
    }

    fn step(&self, n: usize) -> Option<&ScriptStep> {
        match self {
            ScriptEntry::One(s) => Some(s),
            ScriptEntry::Sequence(steps) => steps.get(n).or(steps.last()),
        }
    }
}

/// Answers every id found in a batch with `{"id": id, <field>: value}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IdTable {
    pub field: String,
    #[serde(default)]
    pub values: BTreeMap<String, Value>,
    /// Used for ids missing from `values`; `{id}` is replaced by the id.
    /// Ids with neither a value nor a template are left out of the answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
}

impl IdTable {
    fn answer(&self, ids: &[String]) -> String {
        let rows: Vec<Value> = ids
            .iter()
            .filter_map(|id| {
                let v = match (self.values.get(id), &self.template) {
                    (Some(v), _) => v.clone(),
                    (None, Some(t)) => Value::String(t.replace("{id}", id)),
                    (None, None) => return None,
                };
                let mut row = serde_json::Map::new();
                row.insert("id".into(), json!(id));
                row.insert(self.field.clone(), v);
                Some(Value::Object(row))
            })
            .collect();
        Value::Array(rows).to_string()
    }
}

/// Script file contents.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub responses: BTreeMap<String, ScriptEntry>,
    #[serde(default)]
    pub tables: BTreeMap<String, IdTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<ScriptEntry>,
}

impl Script {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read script {}: {e}", path.display()))?;
        Self::from_json(&text).map_err(|e| format!("invalid script {}: {e}", path.display()))
    }

    pub fn respond(mut self, key: &str, entry: ScriptEntry) -> Self {
        self.responses.insert(key.to_string(), entry);
        self
    }

    pub fn table(mut self, key: &str, table: IdTable) -> Self {
        self.tables.insert(key.to_string(), table);
        self
    }
}

#[derive(Debug)]
pub struct ScriptedBackend {
    script: Script,
    calls: Mutex<HashMap<String, usize>>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        Self {
            script,
            calls: Mutex::new(HashMap::new()),
        }
    }

    pub fn script(&self) -> &Script {
        &self.script
    }

    fn next_step(&self, key: &str, entry: &ScriptEntry) -> Option<ScriptStep> {
        let mut calls = self.calls.lock().unwrap();
        let n = calls.entry(key.to_string()).or_insert(0);
        let step = entry.step(*n).cloned();
        *n += 1;
        step
    }

    fn lookup(&self, call: &BackendCall<'_>) -> Result<ScriptStep, BackendError> {
        let tag = call.tag;
        let stage = tag.stage.as_str();
        let keys = [
            format!("{stage}#{}:{}", tag.round, tag.batch),
            format!("{stage}:{}", tag.batch),
            format!("{stage}#{}", tag.round),
            stage.to_string(),
        ];
        for key in &keys {
            if let Some(entry) = self.script.responses.get(key) {
                if let Some(step) = self.next_step(key, entry) {
                    return Ok(step);
                }
            }
        }
        for key in &keys[2..] {
            if let Some(table) = self.script.tables.get(key) {
                let ids = extract_item_ids(call.user);
                return Ok(ScriptStep::Text(table.answer(&ids)));
            }
        }
        if let Some(entry) = &self.script.default {
            if let Some(step) = self.next_step("<default>", entry) {
                return Ok(step);
            }
        }
        Err(BackendError::Fatal(format!("no scripted response for {tag}")))
    }
}

impl ChatBackend for ScriptedBackend {
    fn backend_id(&self) -> String {
        if self.script.name.is_empty() {
            "scripted".to_string()
        } else {
            format!("scripted:{}", self.script.name)
        }
    }

    fn send(&self, call: &BackendCall<'_>) -> Result<BackendReply, BackendError> {
        let text = match self.lookup(call)? {
            ScriptStep::Text(t) => t,
            ScriptStep::Fault { error, message } => {
                let message = if message.is_empty() {
                    "injected fault".to_string()
                } else {
                    message
                };
                return Err(match error {
                    FaultKind::Transport => BackendError::Transport(message),
                    FaultKind::RateLimit => BackendError::RateLimited {
                        message,
                        retry_after: None,
                    },
                    FaultKind::ContextOverflow => BackendError::ContextOverflow(message),
                    FaultKind::Fatal => BackendError::Fatal(message),
                });
            }
        };
        // A provider stops generating at max_tokens; mirror that.
        let spans = call.counter.token_spans(&text);
        let text = if spans.len() > call.params.max_tokens {
            text[..spans[call.params.max_tokens - 1].end].to_string()
        } else {
            text
        };
        Ok(BackendReply {
            usage: TokenUsage {
                prompt: call.counter.count(call.system) + call.counter.count(call.user),
                completion: call.counter.count(&text),
            },
            text,
            backend_id: self.backend_id(),
        })
    }
}
