//! Run configuration file.
//!
//! The file is TOML. Top-level keys:
//!
//! ```toml
//! dataset = "cases.jsonl"          # JSONL, one {"id", "text", "gold_theme"?} per line
//! context = "context.json"         # analysis context (JSON or TOML), or:
//! research_questions = ["What kinds of theft are described?"]
//! run_dir = "runs/theft"
//! backend = "live"                 # or "scripted:script.json"
//!
//! [live]
//! endpoint = "https://api.openai.com/v1/chat/completions"
//! model = "gpt-4"
//!
//! [settings]                       # run settings, fixed at ingest
//! seed = 7
//! k = 3
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use thematic_core::gateway::LiveConfig;
use thematic_core::RunSettings;

use crate::error::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub context: Option<PathBuf>,
    #[serde(default)]
    pub research_questions: Vec<String>,
    pub run_dir: Option<PathBuf>,
    pub backend: Option<String>,
    pub live: Option<LiveConfig>,
    pub settings: Option<RunSettings>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::config(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.check_paths()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.dataset, &mut self.context, &mut self.run_dir].into_iter().flatten() {
            join(p);
        }
        if let Some(s) = &mut self.settings {
            for p in [&mut s.resources_dir, &mut s.templates_dir].into_iter().flatten() {
                join(p);
            }
        }
        if let Some(spec) = &self.backend {
            if let Ok(BackendSpec::Scripted(p)) = BackendSpec::parse(spec) {
                if p.is_relative() {
                    self.backend = Some(format!("scripted:{}", base.join(p).display()));
                }
            }
        }
    }

    /// Every input path the file names must exist.
    fn check_paths(&self) -> Result<(), CliError> {
        let mut inputs: Vec<&Path> = Vec::new();
        inputs.extend(self.dataset.as_deref());
        inputs.extend(self.context.as_deref());
        if let Some(s) = &self.settings {
            inputs.extend(s.resources_dir.as_deref());
            inputs.extend(s.templates_dir.as_deref());
        }
        for p in inputs {
            if !p.exists() {
                return Err(CliError::config(format!("{} does not exist", p.display())));
            }
        }
        if let Some(spec) = &self.backend {
            if let BackendSpec::Scripted(p) = BackendSpec::parse(spec)? {
                if !p.is_file() {
                    return Err(CliError::config(format!("script {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Live,
    Scripted(PathBuf),
}

impl BackendSpec {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s.split_once(':') {
            None if s == "live" => Ok(Self::Live),
            Some(("scripted", path)) if !path.is_empty() => Ok(Self::Scripted(PathBuf::from(path))),
            _ => Err(CliError::config(format!(
                "backend must be \"live\" or \"scripted:<path>\", got {s:?}"
            ))),
        }
    }
}
