//! The `srus` command-line pipeline: simulate, filter, train, infer, eval
//! and render.

pub mod commands;
pub mod config;
pub mod render;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use srus_core::SrusError;

pub use config::PipelineConfig;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const NUMERIC: i32 = 3;
}

pub fn exit_code(e: &SrusError) -> i32 {
    if e.is_numeric() {
        exit::NUMERIC
    } else if e.is_usage() {
        exit::USAGE
    } else {
        exit::DATA
    }
}

#[derive(Debug, Parser)]
#[command(name = "srus", version, about = "Super-resolution ultrasound localization pipeline")]
pub struct Cli {
    /// Master seed; overrides `master_seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a labelled dataset.
    Simulate(SimulateArgs),
    /// Clutter-filter every stack of a dataset.
    Filter(FilterArgs),
    /// Train a detection network on a dataset.
    Train(TrainArgs),
    /// Form a super-resolved image from one stack or a whole dataset.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Render an accumulated image for display.
    Render(RenderArgs),
    /// Print the resolved configuration.
    Config(ConfigArgs),
}

#[derive(Debug, Args)]
pub struct ConfigSource {
    /// JSON config document; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub cfg: ConfigSource,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of stacks; overrides `dataset.count`.
    #[arg(long)]
    pub count: Option<usize>,
    /// Build held-out set N (its own vessel morphologies) instead of training data.
    #[arg(long)]
    pub test_set: Option<u32>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[command(flatten)]
    pub cfg: ConfigSource,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigSource,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub cfg: ConfigSource,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// A single `.iqf` stack.
    #[arg(long, conflicts_with = "dataset", required_unless_present = "dataset")]
    pub stack: Option<PathBuf>,
    /// Every stack of a dataset directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// PNG path for `--stack`, directory for `--dataset`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigSource,
    /// Predictions: sidecar JSON, point-set JSON, or a directory of sidecars.
    /// Repeat together with `--truth` for several sets.
    #[arg(long, required = true)]
    pub pred: Vec<PathBuf>,
    /// Ground truth: point-set JSON or a dataset directory.
    #[arg(long, required = true)]
    pub truth: Vec<PathBuf>,
    /// Matching radius in micrometres; overrides `eval.radius_um`.
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Sidecar JSON written by `infer`, or a 16-bit PNG of counts.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Bit depth, 8 or 16.
    #[arg(long, default_value_t = 8, value_parser = parse_bits)]
    pub bits: u8,
    /// Log-compress intensities (default).
    #[arg(long, overrides_with = "no_log")]
    pub log: bool,
    /// Linear intensities.
    #[arg(long, overrides_with = "log")]
    pub no_log: bool,
    #[arg(long, default_value = "gray")]
    pub colormap: String,
    /// Render the vessel-enhanced image instead of raw counts.
    #[arg(long)]
    pub enhanced: bool,
}

fn parse_bits(s: &str) -> Result<u8, String> {
    match s {
        "8" => Ok(8),
        "16" => Ok(16),
        _ => Err(format!("expected 8 or 16, got `{s}`")),
    }
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[command(flatten)]
    pub cfg: ConfigSource,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return exit::USAGE;
        }
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match commands::dispatch(&cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
