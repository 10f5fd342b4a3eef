//! The `smart` command line: one entry point for every pipeline stage.
//!
//! Exit codes: 0 on success, 2 for usage errors, 3 for invalid
//! configuration (reported with the offending field path) and 1 for any
//! other failure. Failures print a single `error[<category>] …` line on
//! stderr.

mod artifacts;
mod commands;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use artifacts::{Manifest, MANIFEST_FILE};

#[derive(Debug, Parser)]
#[command(name = "smart", version, about = "Tokenized multi-agent traffic simulation pipeline")]
pub struct Cli {
    /// More log output (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only print errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenarios.
    SynthGen(SynthGenArgs),
    /// Build a motion or road token vocabulary from scenarios.
    BuildVocab(BuildVocabArgs),
    /// Tokenize scenarios with existing vocabularies.
    Tokenize(TokenizeArgs),
    /// Train a model from a JSON config.
    Train(TrainArgs),
    /// Simulate a scenario from a checkpoint.
    Rollout(RolloutArgs),
    /// Score rollouts against the ground-truth scenario.
    Eval(EvalArgs),
    /// Fit a power law to (x, loss) points.
    ScalingFit(ScalingFitArgs),
    /// Run the built-in invariant checks.
    Selftest,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthGen(_) => "synth-gen",
            Command::BuildVocab(_) => "build-vocab",
            Command::Tokenize(_) => "tokenize",
            Command::Train(_) => "train",
            Command::Rollout(_) => "rollout",
            Command::Eval(_) => "eval",
            Command::ScalingFit(_) => "scaling-fit",
            Command::Selftest => "selftest",
        }
    }
}

#[derive(Debug, Args, serde::Serialize)]
pub struct SynthGenArgs {
    /// Map kind, or a comma-separated list cycled over scenarios:
    /// straight, arc, intersection.
    #[arg(long, default_value = "straight")]
    pub kind: String,
    #[arg(long, default_value_t = 2)]
    pub n_lanes: usize,
    /// Vehicles per scenario.
    #[arg(long, default_value_t = 8)]
    pub n_agents: usize,
    #[arg(long, default_value_t = 0)]
    pub n_pedestrians: usize,
    #[arg(long, default_value_t = 0)]
    pub n_cyclists: usize,
    /// States before the current one.
    #[arg(long, default_value_t = 11)]
    pub history: usize,
    /// Future states after the history window.
    #[arg(long, default_value_t = 30)]
    pub horizon: usize,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct BuildVocabArgs {
    /// vehicle, pedestrian, cyclist or road.
    #[arg(long)]
    pub class: String,
    /// Target vocabulary size.
    #[arg(long)]
    pub size: usize,
    /// Cover radius; defaults per class.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scenario file or directory of scenario files.
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct TokenizeArgs {
    /// Vocabulary files (one per motion class, optionally a road one).
    #[arg(long, required = true)]
    pub vocab: Vec<PathBuf>,
    /// Scenario file or directory.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output file (for one scenario) or directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct TrainArgs {
    /// JSON training config.
    #[arg(long)]
    pub config: PathBuf,
    /// Directory of scenario files; relative vocabulary paths resolve here.
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct RolloutArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub scenario: PathBuf,
    /// Number of simulations.
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Warm-start tokens; defaults to the scenario history.
    #[arg(long)]
    pub history_tokens: Option<usize>,
    /// Generated tokens; defaults to the rest of the scenario.
    #[arg(long)]
    pub future_tokens: Option<usize>,
    /// Vocabulary files; defaults to the `vocab_*.json` files next to the
    /// checkpoint.
    #[arg(long)]
    pub vocab: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct EvalArgs {
    /// Ground-truth scenario file.
    #[arg(long)]
    pub gt: PathBuf,
    /// Rollout set file.
    #[arg(long)]
    pub rollouts: PathBuf,
    /// Report JSON path; a CSV row is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct ScalingFitArgs {
    /// CSV of `x,loss` rows.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output directory; defaults to the input's directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Points on the fitted curve.
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
}

/// Machine-parsable failure category.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Usage,
    Config,
    Io,
    Data,
    Selftest,
    Runtime,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Usage => "usage",
            Category::Config => "config",
            Category::Io => "io",
            Category::Data => "data",
            Category::Selftest => "selftest",
            Category::Runtime => "runtime",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Category::Usage => 2,
            Category::Config => 3,
            _ => 1,
        }
    }
}

/// An invalid configuration value, reported with its field path.
#[derive(Debug)]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError { field: field.into(), reason: reason.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "field {}: {}", self.field, self.reason)
    }
}

impl std::error::Error for ConfigError {}

/// Failing invariant checks.
#[derive(Debug)]
pub struct SelftestFailed(pub usize);

impl fmt::Display for SelftestFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} propert{} failed", self.0, if self.0 == 1 { "y" } else { "ies" })
    }
}

impl std::error::Error for SelftestFailed {}

/// Category and one-line message of a failure, taken from the first error
/// in its chain that carries a category.
pub fn classify(err: &anyhow::Error) -> (Category, String) {
    use smart_core::metrics::MetricsError;
    use smart_core::rollout::RolloutError;
    use smart_core::training::TrainError;
    let flat = |e: &anyhow::Error| e.chain().map(|c| c.to_string()).collect::<Vec<_>>().join(": ").replace('\n', " ");
    for cause in err.chain() {
        if let Some(c) = cause.downcast_ref::<ConfigError>() {
            return (Category::Config, c.to_string());
        }
        if let Some(TrainError::Config { field, reason }) = cause.downcast_ref::<TrainError>() {
            return (Category::Config, ConfigError::new(field, reason).to_string());
        }
        if let Some(RolloutError::Config { field, reason }) = cause.downcast_ref::<RolloutError>() {
            return (Category::Config, ConfigError::new(field, reason).to_string());
        }
        if let Some(MetricsError::Config(reason)) = cause.downcast_ref::<MetricsError>() {
            return (Category::Config, ConfigError::new("histogram", reason).to_string());
        }
        if cause.downcast_ref::<SelftestFailed>().is_some() {
            return (Category::Selftest, flat(err));
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return (Category::Io, flat(err));
        }
        if let Some(e) = cause.downcast_ref::<smart_core::Error>() {
            let category = match e {
                smart_core::Error::Io { .. } => Category::Io,
                _ => Category::Data,
            };
            return (category, flat(err));
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() || cause.downcast_ref::<smart_core::scaling::ScalingError>().is_some() {
            return (Category::Data, flat(err));
        }
    }
    (Category::Runtime, flat(err))
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        (false, 2) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().format_timestamp(None).try_init();
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { Category::Usage.exit_code() } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose, cli.quiet);
    match commands::dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let (category, message) = classify(&e);
            eprintln!("error[{}] {}", category.name(), message);
            category.exit_code()
        }
    }
}
