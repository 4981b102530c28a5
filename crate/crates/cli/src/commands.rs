use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;

use thematic_core::gateway::{LiveBackend, Script, ScriptedBackend};
use thematic_core::pipeline::{Progress, ProgressFn};
use thematic_core::{
    parse_dataset, AnalysisContext, ChatBackend, Dataset, Feedback, QualityAnnotation, RetryPolicy, Review, Run,
    RunSettings, RunStore, RunView, ThemeSet,
};
use thematic_service::{BackendFactory, ServiceConfig};

use crate::config::{BackendSpec, RunConfig};
use crate::error::CliError;
use crate::{export, Command, Format, Global};

/// The config file and the command-line flags that override it.
pub(crate) struct Env {
    pub file: RunConfig,
    pub flags: Global,
}

fn write_err(e: std::io::Error) -> CliError {
    CliError::other(format!("cannot write output: {e}"))
}

/// Reads a JSON file, or TOML when the extension says so.
fn read_doc<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read {what} {}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::data(format!("invalid {what} {}: {e}", path.display())))
}

impl Env {
    pub(crate) fn dispatch(&self, command: Command, out: &mut dyn Write) -> Result<(), CliError> {
        if let Some(spec) = &self.flags.backend {
            BackendSpec::parse(spec)?;
        }
        match command {
            Command::Ingest {
                dataset,
                context,
                question,
                name,
            } => self.ingest(dataset, context, question, name, out),
            Command::Code => {
                let run = self.open_run()?;
                self.code(&run, self.flags.round, out)
            }
            Command::Feedback {
                positive,
                negative,
                exemplar,
                file,
                no_rerun,
            } => {
                let mut fb = match &file {
                    Some(p) => read_doc::<Feedback>(p, "feedback file")?,
                    None => Feedback::default(),
                };
                fb.positive.extend(positive);
                fb.negative.extend(negative);
                fb.exemplars.extend(exemplar);
                self.feedback(&fb, no_rerun, out)
            }
            Command::Collate => self.collate(out),
            Command::Merge => self.merge(out),
            Command::ApproveThemes { file } => self.approve(file.as_deref(), out),
            Command::Classify { allow_unapproved } => self.classify(allow_unapproved, out),
            Command::Evaluate { format, output } => {
                let store = self.read_store()?;
                let k = self.flags.k.unwrap_or(store.manifest().settings.k);
                let report = RunView::new(&store).evaluate(k)?;
                let text = match format {
                    Format::Text => report.to_text(),
                    Format::Json => export::json(&report)?,
                    other => return Err(CliError::usage(format!("evaluate cannot write {other:?}"))),
                };
                export::emit(&text, output.as_deref(), out)
            }
            Command::Export { what, format, output } => {
                let store = self.read_store()?;
                let text = export::render(&store, what, format, self.flags.round, self.flags.k)?;
                export::emit(&text, output.as_deref(), out)
            }
            Command::Annotate { file } => self.annotate(&file, out),
            Command::Serve { addr, root } => self.serve(addr, root),
        }
    }

    fn run_dir(&self) -> Result<PathBuf, CliError> {
        self.flags
            .run_dir
            .clone()
            .or_else(|| self.file.run_dir.clone())
            .ok_or_else(|| CliError::config("no run directory: pass --run-dir or set run_dir in the config"))
    }

    fn backend_spec(&self) -> Result<BackendSpec, CliError> {
        let spec = self
            .flags
            .backend
            .as_deref()
            .or(self.file.backend.as_deref())
            .ok_or_else(|| CliError::config("no backend: pass --backend or set backend in the config"))?;
        BackendSpec::parse(spec)
    }

    fn backend(&self) -> Result<Arc<dyn ChatBackend>, CliError> {
        build_backend(&self.backend_spec()?, &self.file)
    }

    /// Run settings for a new run: the config's, then flags on top.
    fn new_settings(&self) -> RunSettings {
        let mut s = self.file.settings.clone().unwrap_or_default();
        if let Some(v) = self.flags.seed {
            s.seed = v;
        }
        if let Some(v) = self.flags.k {
            s.k = v;
        }
        if let Some(v) = self.flags.parallelism {
            s.parallelism = v;
        }
        if let Some(v) = self.flags.sample_size {
            s.limits.interim_sample_size = v;
        }
        s
    }

    /// The sample size belongs to the run; a different value later is a
    /// configuration mistake, not an override.
    fn check_fixed(&self, store: &RunStore) -> Result<(), CliError> {
        let fixed = store.manifest().settings.limits.interim_sample_size;
        match self.flags.sample_size {
            Some(v) if v != fixed => Err(CliError::config(format!(
                "--sample-size {v} differs from the run's sample size {fixed}, which is fixed at ingest"
            ))),
            _ => Ok(()),
        }
    }

    fn read_store(&self) -> Result<RunStore, CliError> {
        let store = RunStore::open_read(&self.run_dir()?)?;
        self.check_fixed(&store)?;
        Ok(store)
    }

    fn write_store(&self) -> Result<RunStore, CliError> {
        let store = RunStore::open(&self.run_dir()?)?;
        self.check_fixed(&store)?;
        Ok(store)
    }

    fn open_run(&self) -> Result<Run, CliError> {
        let store = Arc::new(self.write_store()?);
        let progress: Arc<ProgressFn> = Arc::new(|p: Progress| {
            tracing::info!(stage = %p.stage, round = p.round, "batch {}/{}", p.done, p.total);
        });
        Ok(Run::open(store, self.backend()?, RetryPolicy::default())?.with_progress(progress))
    }

    fn ingest(
        &self,
        dataset: Option<PathBuf>,
        context: Option<PathBuf>,
        questions: Vec<String>,
        name: Option<String>,
        out: &mut dyn Write,
    ) -> Result<(), CliError> {
        let path = dataset
            .or_else(|| self.file.dataset.clone())
            .ok_or_else(|| CliError::config("no dataset: pass --dataset or set dataset in the config"))?;
        let name = name.unwrap_or_else(|| {
            path.file_stem()
                .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
        });
        let ds = read_dataset(&path, &name)?;

        // A context source given as a flag replaces whatever the file says.
        let (file_ctx, file_qs) = if context.is_some() || !questions.is_empty() {
            (context, questions)
        } else {
            (self.file.context.clone(), self.file.research_questions.clone())
        };
        let ctx = match (file_ctx, file_qs.is_empty()) {
            (Some(p), true) => read_doc::<AnalysisContext>(&p, "analysis context")?,
            (Some(_), false) => {
                return Err(CliError::config(
                    "give either an analysis context file or research questions, not both",
                ))
            }
            (None, false) => AnalysisContext::new(file_qs).map_err(|e| CliError::validation(e.to_string()))?,
            (None, true) => {
                return Err(CliError::config(
                    "no analysis context: pass --context or --question, or set one in the config",
                ))
            }
        };

        let dir = self.run_dir()?;
        let store = Run::ingest(&dir, &ds, &ctx, self.new_settings())?;
        writeln!(
            out,
            "ingested {} data points from {} into {} (digest {})",
            ds.len(),
            path.display(),
            dir.display(),
            &store.manifest().dataset_digest
        )
        .map_err(write_err)
    }

    fn code(&self, run: &Run, round: Option<u32>, out: &mut dyn Write) -> Result<(), CliError> {
        let codes = run.code(round, self.flags.seed)?;
        let round = codes.first().map_or(0, |c| c.round);
        writeln!(out, "coded {} data points in round {round}", codes.len()).map_err(write_err)
    }

    fn feedback(&self, fb: &Feedback, no_rerun: bool, out: &mut dyn Write) -> Result<(), CliError> {
        if no_rerun {
            let store = self.write_store()?;
            let round = Review::new(&store).feedback(fb)?;
            return writeln!(out, "recorded feedback; round {round} is ready for coding").map_err(write_err);
        }
        // Build the backend first, so a bad backend leaves no orphaned round.
        let run = self.open_run()?;
        let round = run.feedback(fb)?;
        writeln!(out, "recorded feedback; coding round {round}").map_err(write_err)?;
        self.code(&run, Some(round), out)
    }

    fn collate(&self, out: &mut dyn Write) -> Result<(), CliError> {
        let run = self.open_run()?;
        let c = run.collate(self.flags.round)?;
        writeln!(out, "{} candidate themes", c.themes.len()).map_err(write_err)?;
        for (label, n) in c.frequencies() {
            writeln!(out, "  {n:>5}  {label}").map_err(write_err)?;
        }
        Ok(())
    }

    fn merge(&self, out: &mut dyn Write) -> Result<(), CliError> {
        let run = self.open_run()?;
        let set = run.merge(self.flags.round)?;
        writeln!(out, "proposed {} themes (approve with `thematic approve-themes`)", set.len()).map_err(write_err)?;
        write_themes(&set, out)
    }

    fn approve(&self, file: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
        let edited = file.map(|p| read_doc::<ThemeSet>(p, "theme set")).transpose()?;
        let store = self.write_store()?;
        let record = Review::new(&store).approve_themes(edited)?;
        let how = if record.edited { "edited" } else { "as proposed" };
        writeln!(out, "approved {} themes {how}", record.themes.len()).map_err(write_err)?;
        write_themes(&record.themes, out)
    }

    fn classify(&self, allow_unapproved: bool, out: &mut dyn Write) -> Result<(), CliError> {
        let run = self.open_run()?;
        let assignments = run.classify(self.flags.k, self.flags.parallelism, allow_unapproved)?;
        writeln!(out, "classified {} data points", assignments.len()).map_err(write_err)
    }

    fn annotate(&self, file: &Path, out: &mut dyn Write) -> Result<(), CliError> {
        let text = std::fs::read_to_string(file)
            .map_err(|e| CliError::data(format!("cannot read {}: {e}", file.display())))?;
        let bad = |e: serde_json::Error| CliError::data(format!("invalid annotations in {}: {e}", file.display()));
        let batch: Vec<QualityAnnotation> = if text.trim_start().starts_with('[') {
            serde_json::from_str(&text).map_err(bad)?
        } else {
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<Result<_, _>>()
                .map_err(bad)?
        };
        let store = self.write_store()?;
        let n = Review::new(&store).annotate(&batch)?;
        writeln!(out, "stored {n} annotations").map_err(write_err)
    }

    fn serve(&self, addr: std::net::SocketAddr, root: Option<PathBuf>) -> Result<(), CliError> {
        let root = match root {
            Some(r) => r,
            None => self
                .run_dir()
                .ok()
                .and_then(|d| d.parent().map(Path::to_path_buf))
                .unwrap_or_else(|| PathBuf::from("runs")),
        };
        let spec = self.backend_spec()?;
        let file = self.file.clone();
        let factory: BackendFactory = Arc::new(move || build_backend(&spec, &file).map_err(|e| e.message));
        let config = ServiceConfig::new(root, factory);
        let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::other(e.to_string()))?;
        rt.block_on(thematic_service::serve(addr, config))
            .map_err(|e| CliError::other(format!("service stopped: {e}")))
    }
}

fn build_backend(spec: &BackendSpec, file: &RunConfig) -> Result<Arc<dyn ChatBackend>, CliError> {
    match spec {
        BackendSpec::Live => {
            let cfg = file.live.clone().unwrap_or_default();
            Ok(Arc::new(LiveBackend::from_env(cfg).map_err(CliError::config)?))
        }
        BackendSpec::Scripted(path) => {
            let script = Script::load(path).map_err(CliError::config)?;
            Ok(Arc::new(ScriptedBackend::new(script)))
        }
    }
}

fn read_dataset(path: &Path, name: &str) -> Result<Dataset, CliError> {
    let f = File::open(path).map_err(|e| CliError::data(format!("cannot read dataset {}: {e}", path.display())))?;
    parse_dataset(name, BufReader::new(f)).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn write_themes(set: &ThemeSet, out: &mut dyn Write) -> Result<(), CliError> {
    for t in &set.themes {
        writeln!(out, "- {}", t.label).map_err(write_err)?;
        for s in &t.sub_themes {
            writeln!(out, "    - {s}").map_err(write_err)?;
        }
    }
    Ok(())
}
