//! `neurok` command-line pipeline.

pub mod commands;
pub mod config;
pub mod manifest;

use std::fmt;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "neurok", version, about = "Learned kinematic state spaces and latent-space simulation")]
pub struct Cli {
    /// Maximum worker threads (default: available cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate ground-truth trajectories and a dataset index.
    GenData(GenDataArgs),
    /// Train the conditional VAE.
    Train(TrainArgs),
    /// Compute the active-subspace chart of a trained decoder.
    Reduce(ReduceArgs),
    /// Integrate Euler-Lagrange dynamics on a chart.
    Simulate(SimulateArgs),
    /// Fit chart states to target meshes and report shape metrics.
    EvalIk(EvalIkArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Reduce(_) => "reduce",
            Command::Simulate(_) => "simulate",
            Command::EvalIk(_) => "eval-ik",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Stage config; defaults apply without one.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// KL weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReduceArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Rest mesh (OBJ) the chart is built for.
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub k_q: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub n_mc: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalIkArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub chart: PathBuf,
    /// Mesh the map drives (OBJ).
    #[arg(long)]
    pub input: PathBuf,
    /// Target meshes (OBJ); repeatable.
    #[arg(long, required = true)]
    pub target: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Marks an error as a numerical failure (exit code 2).
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "numerical failure: {}", self.0)
    }
}

impl std::error::Error for NumericalFailure {}

/// 2 for numerical failures anywhere in the chain, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let numerical = err.chain().any(|c| {
        c.downcast_ref::<NumericalFailure>().is_some()
            || c.downcast_ref::<neurok_core::Error>().is_some_and(|e| e.is_numerical())
    });
    if numerical {
        2
    } else {
        1
    }
}

/// One-line JSON error record for stderr.
pub fn error_record(command: &str, err: &anyhow::Error) -> String {
    let code = exit_code(err);
    serde_json::json!({
        "command": command,
        "kind": if code == 2 { "numerical_failure" } else { "user_error" },
        "exit_code": code,
        "message": err.to_string(),
        "causes": err.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
    })
    .to_string()
}

/// Flag, then `NEUROK_SEED`, then the config value.
pub fn resolve_seed(flag: Option<u64>, file: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("NEUROK_SEED") {
        Ok(v) => v.trim().parse().with_context(|| format!("NEUROK_SEED must be an unsigned integer, got {v:?}")),
        Err(_) => Ok(file),
    }
}

pub fn worker_count(flag: Option<usize>) -> usize {
    flag.filter(|w| *w > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

pub fn run(cli: Cli) -> Result<()> {
    let workers = worker_count(cli.workers);
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Reduce(a) => commands::reduce(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::EvalIk(a) => commands::eval_ik(&a, workers),
    }
}
