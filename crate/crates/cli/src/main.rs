//! `julia`: synthesize, train, impute, evaluate and sweep JULIA tensor completion models.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 training failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use julia_core::tensor::Aggregate;
use julia_core::train::InitStrategy;
use julia_core::{Activation, OptimizerKind};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "julia", version, about = "Sparse tensor completion with a hybrid CP + neural model")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic tensor and its ground truth.
    Synth(SynthArgs),
    /// Train a model with restarts.
    Train(TrainArgs),
    /// Predict values at query indices.
    Impute(ImputeArgs),
    /// Score a model on held-out entries.
    Eval(EvalArgs),
    /// Train every rank split for every seed and tabulate the results.
    Sweep(SweepArgs),
}

/// A JULIA rank split `R/F`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankSplit {
    pub r: usize,
    pub f: usize,
}

impl std::str::FromStr for RankSplit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (r, f) = s.split_once('/').ok_or_else(|| format!("expected R/F, got '{s}'"))?;
        let r = r.trim().parse().map_err(|_| format!("bad R in '{s}'"))?;
        let f = f.trim().parse().map_err(|_| format!("bad F in '{s}'"))?;
        if r + f == 0 {
            return Err("rank split 0/0 has no components".into());
        }
        Ok(RankSplit { r, f })
    }
}

/// Comma-separated values taken as one flag value, so a later flag replaces
/// the whole list rather than appending to it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct List<T>(pub Vec<T>);

impl<T: std::str::FromStr> std::str::FromStr for List<T>
where
    T::Err: std::fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<T>().map_err(|e| format!("'{p}': {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(List)
    }
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct SynthArgs {
    /// Comma-separated mode sizes, e.g. 100,100,100.
    #[arg(long)]
    pub shape: List<usize>,
    #[arg(long)]
    pub r_true: usize,
    #[arg(long)]
    pub f_true: usize,
    /// Fraction of cells left unobserved, in [0, 1).
    #[arg(long)]
    pub missing: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = Activation::Relu)]
    pub activation: Activation,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with default values for any of these flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Input tensor options.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// COO text file: one `i_1,...,i_N,value` line per entry.
    #[arg(long)]
    pub data: PathBuf,
    /// Number of modes; inferred from the file when omitted.
    #[arg(long)]
    pub modes: Option<usize>,
    /// Indices in the file start at 1.
    #[arg(long)]
    pub one_based: bool,
    /// Merge duplicate indices instead of rejecting them.
    #[arg(long)]
    pub aggregate: Option<Aggregate>,
}

/// Training hyperparameters. Omitted values take the library defaults.
#[derive(Args, Debug, Clone)]
pub struct HyperArgs {
    /// Learning rate of both blocks.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_linear: Option<f64>,
    #[arg(long)]
    pub lr_nonlinear: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmstart_epochs: Option<usize>,
    #[arg(long)]
    pub ao_max_iters: Option<usize>,
    #[arg(long)]
    pub ao_epochs_per_block: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub early_stop_rel_tol: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_restarts: Option<usize>,
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub init: Option<InitStrategy>,
    #[arg(long, default_value_t = Activation::Relu)]
    pub activation: Activation,
    /// Record no timings, for byte-identical outputs.
    #[arg(long)]
    pub deterministic: bool,
    /// Fraction of entries used for training plus validation.
    #[arg(long, default_value_t = 0.8)]
    pub train_frac: f64,
    /// Fraction of the training part held out for validation.
    #[arg(long, default_value_t = 0.1)]
    pub val_frac: f64,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long)]
    pub rank_split: RankSplit,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct ImputeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// One comma- or tab-separated index tuple per line.
    #[arg(long)]
    pub queries: PathBuf,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub one_based: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub one_based: bool,
    /// Ground-truth checkpoint to align the CP components against.
    #[arg(long)]
    pub align: Option<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct SweepArgs {
    #[command(flatten)]
    pub input: DataArgs,
    /// Comma-separated rank splits, e.g. 4/16,10/10,16/4.
    #[arg(long)]
    pub splits: List<RankSplit>,
    /// Comma-separated seeds, one run per split and seed.
    #[arg(long)]
    pub seeds: Option<List<u64>>,
    /// Single seed; shorthand for `--seeds N`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Runs trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Output CSV file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn run() -> Result<(), CliError> {
    let args = config::expand(std::env::args_os().collect())?;
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Impute(a) => commands::impute(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Sweep(a) => commands::sweep(&a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("julia: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
