//! `xpr`: synthesize datasets, build map indexes, train, match, evaluate,
//! self-check and benchmark.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "xpr", version, about = "Cross-modal camera-to-LiDAR place recognition")]
pub struct Cli {
    /// Where to write the run manifest (default: next to the primary output).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world and write it as a dataset directory.
    Synth(SynthArgs),
    /// Render and describe every map viewpoint into an index file.
    BuildMap(BuildMapArgs),
    /// Match query observations against an index.
    Match(MatchArgs),
    /// Train the query branch and write a checkpoint.
    Train(TrainArgs),
    /// Compute Recall@K from a results file.
    Eval(EvalArgs),
    /// Run gradient and oracle checks.
    Selfcheck(SelfcheckArgs),
    /// Time the query, viewpoint and matching stages.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub places: usize,
    /// Surface samples per square meter.
    #[arg(long, default_value_t = xpr_core::synth::DEFAULT_DENSITY)]
    pub density: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON config to start from (its seed is replaced by --seed).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub train_per_place: usize,
    #[arg(long, default_value_t = 8)]
    pub test_per_place: usize,
    /// Appearance noise of the query observations.
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    /// Build geometry-aliased, semantics-distinct place pairs.
    #[arg(long)]
    pub aliased: bool,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct BuildMapArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: usize,
    #[arg(long)]
    pub lr: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Query split under `<data>/queries/`.
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Loss history CSV (default: `<out>.history.csv`).
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    pub k: Vec<usize>,
    /// Query split under `<data>/queries/` holding the ground truth.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Recall CSV (default: `<results>.recall.csv`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Perturb the analytic end-to-end gradient (the check must then fail).
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub repeat: usize,
    /// Latency CSV (default: `<index>.bench.csv`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Command failure, mapped to the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(anyhow::Error),
    Check(String),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Data(e.into())
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("XPR_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| Failure::Usage(format!("XPR_THREADS must be a non-negative integer, got {value:?}")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("XPR_THREADS: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = configure_threads().and_then(|_| commands::run(cli));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(3)
        }
    }
}
