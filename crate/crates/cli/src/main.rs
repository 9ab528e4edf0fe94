//! `noisy-forge`: train, sweep, bound and scan noise-robust models.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration, 3 training
//! divergence, 4 unreadable or malformed input file, 5 missing prerequisite.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

pub const WORKERS_ENV: &str = "NOISY_FORGE_WORKERS";

#[derive(Parser, Debug)]
#[command(
    name = "noisy-forge",
    version,
    about = "Noise-aware training experiments"
)]
struct Cli {
    /// Worker threads for training and evaluation. Overridden by NOISY_FORGE_WORKERS.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model as described by a config file.
    Train(ConfigArg),
    /// Evaluate a checkpoint over an inference-noise grid.
    Sweep(SweepArgs),
    /// Train noisy-training models on a σ grid and build the upper-bound curve.
    UpperBound(ConfigArg),
    /// Grid-search (α, θ) for variance-aware training.
    Scan(ConfigArg),
    /// Merge curve files into one long-format plot-data CSV.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Experiment config JSON.
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Experiment config JSON (dataset, injection and default grid).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Checkpoint to evaluate [default: <output_dir>/model.nfck].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub sigma_min: f64,
    #[arg(long, default_value_t = 3.0)]
    pub sigma_max: f64,
    #[arg(long, default_value_t = 0.1)]
    pub sigma_step: f64,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Evaluation noise seed [default: the config's sweep seed].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Do not inject noise into the logits.
    #[arg(long)]
    pub no_logit_noise: bool,
    /// Upper-bound curve CSV; enables rAUC in the summary.
    #[arg(long)]
    pub upper: Option<PathBuf>,
    /// Noisy-training curve CSV; with --sigma-train enables preserved accuracy.
    #[arg(long, requires = "sigma_train")]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub sigma_train: Option<f64>,
    /// Output stem: writes <out>.csv and <out>.json [default: <output_dir>/sweep].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory holding the curve files of an experiment.
    #[arg(long, default_value = "out")]
    pub dir: PathBuf,
    /// Noisy-training curve [default: <dir>/nt_curve.csv].
    #[arg(long)]
    pub nt: Option<PathBuf>,
    /// Variance-aware curve [default: <dir>/vant_curve.csv].
    #[arg(long)]
    pub vant: Option<PathBuf>,
    /// Upper-bound curve [default: <dir>/upper_bound.csv].
    #[arg(long)]
    pub upper: Option<PathBuf>,
    /// Optional clean-model curve [default: <dir>/sweep.csv when present].
    #[arg(long)]
    pub clean: Option<PathBuf>,
    /// Output file [default: <dir>/report.csv].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn worker_count(flag: Option<usize>) -> Result<usize, CliError> {
    let from_env = match std::env::var(WORKERS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|n| *n > 0)
                .ok_or_else(|| {
                    CliError::Workers(format!("{WORKERS_ENV}=`{v}` is not a positive integer"))
                })?,
        ),
        Err(_) => None,
    };
    match from_env.or(flag) {
        Some(0) => Err(CliError::Workers("--workers must be positive".into())),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let workers = worker_count(cli.workers)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Workers(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Train(a) => commands::train(&a.config),
        Command::Sweep(a) => commands::sweep(a),
        Command::UpperBound(a) => commands::upper_bound(&a.config),
        Command::Scan(a) => commands::scan(&a.config),
        Command::Report(a) => commands::report(a),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
