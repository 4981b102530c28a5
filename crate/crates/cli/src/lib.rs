//! The `thematic` command-line tool. Every command is a thin wrapper over
//! [`thematic_core::Run`] and [`thematic_core::RunView`].

mod commands;
pub mod config;
mod error;
mod export;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{BackendSpec, RunConfig};
pub use error::{CliError, Failure};

#[derive(Debug, Parser)]
#[command(name = "thematic", version, about = "Thematic analysis with a language model, one stage at a time")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,

    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every command. They override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Global {
    /// Run configuration file (TOML)
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Run directory
    #[arg(long, global = true, value_name = "DIR")]
    pub run_dir: Option<PathBuf>,

    /// Model backend: "live" or "scripted:<path>"
    #[arg(long, global = true, value_name = "SPEC")]
    pub backend: Option<String>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Analysis round (defaults to the latest applicable round)
    #[arg(long, global = true)]
    pub round: Option<u32>,

    /// Number of ranked themes per data point
    #[arg(long, global = true)]
    pub k: Option<usize>,

    /// Concurrent classification requests
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,

    /// Interim codes shown to each coding batch. Fixed when the run is created.
    #[arg(long, global = true)]
    pub sample_size: Option<usize>,

    /// More log output on stderr (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a run from a dataset and an analysis context
    Ingest {
        /// Dataset file (JSONL)
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Analysis context file (JSON or TOML)
        #[arg(long, conflicts_with = "question")]
        context: Option<PathBuf>,
        /// Research question; repeat for several
        #[arg(long)]
        question: Vec<String>,
        /// Dataset name (defaults to the file name)
        #[arg(long)]
        name: Option<String>,
    },
    /// Generate initial codes for a round
    Code,
    /// Record expert feedback and start the next round
    Feedback {
        /// Aspect the codes should capture; repeat for several
        #[arg(long)]
        positive: Vec<String>,
        /// Aspect the codes should leave out; repeat for several
        #[arg(long)]
        negative: Vec<String>,
        /// Example of a desirable code; repeat for several
        #[arg(long)]
        exemplar: Vec<String>,
        /// Feedback file (JSON or TOML with positive, negative, exemplars)
        #[arg(long, value_name = "FILE")]
        file: Option<PathBuf>,
        /// Only record the feedback; do not code the new round
        #[arg(long)]
        no_rerun: bool,
    },
    /// Collate initial codes into candidate themes
    Collate,
    /// Merge candidate themes into a proposed theme set
    Merge,
    /// Approve the proposed theme set, or an edited one from a file
    ApproveThemes {
        /// Theme set JSON: {"themes": [{"label", "sub_themes"}]}
        #[arg(long, value_name = "FILE")]
        file: Option<PathBuf>,
    },
    /// Classify every data point against the approved themes
    Classify {
        /// Use the latest proposal when nothing is approved
        #[arg(long)]
        allow_unapproved: bool,
    },
    /// Report recall, code quality and the theme mapping
    Evaluate {
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        #[arg(long, short, value_name = "FILE")]
        output: Option<PathBuf>,
    },
    /// Write run results to a file or stdout
    Export {
        #[arg(value_enum)]
        what: ExportKind,
        /// Output format (defaults per artifact)
        #[arg(long, value_enum)]
        format: Option<Format>,
        #[arg(long, short, value_name = "FILE")]
        output: Option<PathBuf>,
    },
    /// Add quality annotations of initial codes
    Annotate {
        /// JSONL or JSON array of {"data_point_id", "round", "verdict"}
        #[arg(long, value_name = "FILE")]
        file: PathBuf,
    },
    /// Serve the review API over a directory of runs
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: std::net::SocketAddr,
        /// Directory of runs (defaults to the run directory's parent)
        #[arg(long, value_name = "DIR")]
        root: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
    Jsonl,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportKind {
    Codes,
    Assignments,
    Themes,
    Mapping,
    Flows,
    Report,
}

/// Runs one command, writing its result to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let file = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let env = commands::Env {
        file,
        flags: cli.global,
    };
    env.dispatch(cli.command, out)
}

pub fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    let _ = tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .try_init();
}
