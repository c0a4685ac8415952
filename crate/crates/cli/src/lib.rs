//! Command-line pipelines over `exemplar-core`: ingest and split task files,
//! score and embed prompts, train the regressor, rank and select examples,
//! evaluate Pass@1 and run the studies.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use exemplar_core::dataset::{SplitMode, SplitRatios};
use exemplar_core::prompting::CountScope;
use exemplar_core::rankers::RankerSpec;

mod commands;
mod manifest;
mod settings;

pub use manifest::RunManifest;
pub use settings::{BackendKind, ConfigFile, Settings, ENV_API_KEY, ENV_BASE_URL};

/// Exit code for bad flags or flag combinations.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for failures while running.
pub const EXIT_RUNTIME: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "exemplar", version, about = "Rank and select few-shot examples for code-generation prompts")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Shared by every subcommand. Precedence: flag, then environment, then
/// `--config`, then built-in default.
#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// JSON file with defaults for the options below.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    /// Server root of the HTTP backend [env: BACKEND_BASE_URL].
    #[arg(long, global = true, value_name = "URL")]
    pub base_url: Option<String>,
    #[arg(long, global = true, value_name = "NAME")]
    pub model_name: Option<String>,
    /// Prompt template JSON file.
    #[arg(long, global = true, value_name = "FILE")]
    pub template: Option<PathBuf>,
    /// Root of every random choice made by the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Maximum backend requests in flight.
    #[arg(long, global = true, value_name = "N")]
    pub parallel: Option<usize>,
    /// Response cache file (JSON lines).
    #[arg(long, global = true, value_name = "FILE")]
    pub cache: Option<PathBuf>,
    /// Wiring table for the mock backend (JSON lines).
    #[arg(long, global = true, value_name = "FILE")]
    pub mock_table: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Exit 0 even when some items of a batch failed.
    #[arg(long, global = true)]
    pub keep_going: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a task file and write it in canonical form.
    Ingest {
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
    },
    /// Write train/val/test task files.
    Split {
        #[arg(long, value_name = "FILE")]
        tasks: PathBuf,
        #[arg(long, value_parser = parse_mode, default_value = "by_prompt")]
        mode: SplitMode,
        #[arg(long, value_parser = parse_ratios, default_value = "0.6,0.2,0.2")]
        ratios: SplitRatios,
    },
    /// Source perplexity of every one-example prompt.
    ScoreSource {
        #[arg(long, value_name = "FILE")]
        tasks: PathBuf,
    },
    /// Target perplexity with no example and with each single example, or
    /// with the examples of a selection file.
    ScoreTarget {
        #[arg(long, value_name = "FILE")]
        tasks: PathBuf,
        #[arg(long, value_name = "FILE")]
        selections: Option<PathBuf>,
    },
    /// Embedding of every one-example prompt.
    Embed {
        #[arg(long, value_name = "FILE")]
        tasks: PathBuf,
    },
    /// (embedding, log target perplexity) training pairs; resumable.
    Collect {
        #[arg(long, value_name = "FILE")]
        tasks: PathBuf,
    },
    /// Fit the perplexity regressor.
    Train {
        #[arg(long, value_name = "FILE")]
        pairs: PathBuf,
        #[arg(long, value_name = "FILE")]
        val_pairs: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
        /// Output path; defaults to `model.bin` in the output directory.
        #[arg(long, value_name = "FILE")]
        model_file: Option<PathBuf>,
    },
    /// Rank every task's pool.
    Rank {
        #[arg(long, value_name = "FILE")]
        tasks: PathBuf,
        #[arg(long, value_parser = parse_ranker)]
        ranker: RankerSpec,
        #[arg(long, value_name = "FILE")]
        model_file: Option<PathBuf>,
    },
    /// Take the top N, or the longest prefix within a token budget.
    Select {
        #[arg(long, value_name = "FILE")]
        tasks: PathBuf,
        #[arg(long, value_name = "FILE")]
        rankings: PathBuf,
        #[arg(long, conflicts_with = "budget_tokens", required_unless_present = "budget_tokens")]
        n: Option<usize>,
        #[arg(long)]
        budget_tokens: Option<usize>,
        #[arg(long, value_parser = parse_scope, default_value = "whole_prompt")]
        budget_scope: CountScope,
    },
    /// Pass@1 of generated solutions.
    Eval {
        #[arg(long, value_name = "FILE")]
        tasks: PathBuf,
        /// Examples per task; zero-shot when absent.
        #[arg(long, value_name = "FILE")]
        selections: Option<PathBuf>,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Run one of the studies and export its report.
    #[command(subcommand)]
    Study(Study),
    /// Re-export a saved report and print its series.
    Report {
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum Study {
    /// Target perplexity with no example and with single examples.
    Single {
        #[arg(long, value_name = "FILE")]
        tasks: PathBuf,
    },
    /// Delta target perplexity as random examples are added.
    Multi {
        #[arg(long, value_name = "FILE")]
        tasks: PathBuf,
        #[arg(long, default_value_t = 4)]
        max_n: usize,
        #[arg(long, default_value_t = 5)]
        trials: usize,
    },
    /// Rankers against each other over N.
    Compare {
        #[arg(long, value_name = "FILE")]
        tasks: PathBuf,
        /// Comma-separated; defaults to every ranker that needs no model,
        /// plus both model-based directions when `--model-file` is given.
        #[arg(long, value_parser = parse_ranker, value_delimiter = ',')]
        ranker: Vec<RankerSpec>,
        /// Comma-separated example counts.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        n: Vec<usize>,
        #[arg(long, value_name = "FILE")]
        model_file: Option<PathBuf>,
        #[command(flatten)]
        exec: OptionalExecArgs,
    },
    /// Regressor agreement on unseen prompts and on unseen examples.
    Shift {
        #[arg(long, value_name = "FILE")]
        tasks: PathBuf,
        /// Reuse collected pairs instead of querying the backend.
        #[arg(long, value_name = "FILE")]
        pairs: Option<PathBuf>,
        #[arg(long, value_parser = parse_ratios, default_value = "0.6,0.2,0.2")]
        ratios: SplitRatios,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Target perplexity of passing against failing one-example prompts.
    Contrast {
        #[arg(long, value_name = "FILE")]
        tasks: PathBuf,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Source and target perplexity of every one-example prompt (CSV).
    SourceTarget {
        #[arg(long, value_name = "FILE")]
        tasks: PathBuf,
    },
    /// Embeddings with their log target perplexity (CSV).
    Embeddings {
        #[arg(long, value_name = "FILE")]
        tasks: PathBuf,
        #[arg(long, value_name = "FILE")]
        pairs: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 1000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub learning_rate: f64,
    /// Full batch up to 1024 pairs when absent.
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ExecArgs {
    /// Runner program speaking the executor JSON protocol.
    #[arg(long, value_name = "PROGRAM")]
    pub executor: PathBuf,
    #[arg(long = "executor-arg", value_name = "ARG", allow_hyphen_values = true)]
    pub executor_args: Vec<String>,
    #[arg(long, default_value_t = exemplar_core::evalharness::DEFAULT_MAX_NEW_TOKENS)]
    pub max_new_tokens: usize,
    #[arg(long, default_value_t = exemplar_core::evalharness::DEFAULT_TIMEOUT_MS)]
    pub timeout_ms: u64,
}

#[derive(Debug, Clone, Args)]
pub struct OptionalExecArgs {
    /// Also measure Pass@1 with this runner.
    #[arg(long, value_name = "PROGRAM")]
    pub executor: Option<PathBuf>,
    #[arg(long = "executor-arg", value_name = "ARG", allow_hyphen_values = true)]
    pub executor_args: Vec<String>,
    #[arg(long, default_value_t = exemplar_core::evalharness::DEFAULT_MAX_NEW_TOKENS)]
    pub max_new_tokens: usize,
    #[arg(long, default_value_t = exemplar_core::evalharness::DEFAULT_TIMEOUT_MS)]
    pub timeout_ms: u64,
}

fn parse_mode(s: &str) -> Result<SplitMode, String> {
    s.parse().map_err(|e: exemplar_core::Error| e.to_string())
}

fn parse_ratios(s: &str) -> Result<SplitRatios, String> {
    s.parse().map_err(|e: exemplar_core::Error| e.to_string())
}

fn parse_ranker(s: &str) -> Result<RankerSpec, String> {
    s.parse().map_err(|e: exemplar_core::Error| e.to_string())
}

fn parse_scope(s: &str) -> Result<CountScope, String> {
    s.parse().map_err(|e: exemplar_core::Error| e.to_string())
}

impl ValueEnum for BackendKind {
    fn value_variants<'a>() -> &'a [Self] {
        &[BackendKind::Http, BackendKind::Mock]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            BackendKind::Http => "http",
            BackendKind::Mock => "mock",
        }))
    }
}

/// A bad flag value or combination found after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub(crate) fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let argv: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match commands::execute(cli, argv) {
        Ok(()) => 0,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}
