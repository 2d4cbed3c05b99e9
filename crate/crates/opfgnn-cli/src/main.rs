//! Pipeline front end. Each subcommand reads its inputs, never writes over
//! them, and drops a run manifest next to whatever it produces, so any
//! output directory documents the invocation that filled it.

mod commands;
mod failure;
mod manifest;
mod states;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::failure::Failure;

#[derive(Parser)]
#[command(name = "opfgnn", version, about = "GNN dispatch proxy pipeline for AC optimal power flow")]
struct Cli {
    /// Worker threads for batch parallelism; defaults to the available cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a MATPOWER case and report its dimensions and total demand.
    Parse {
        case: PathBuf,
        /// Also write the summary as JSON.
        #[arg(long, value_name = "PATH")]
        json_out: Option<PathBuf>,
    },
    /// Build the graph-shift operator and report edge and spectrum stats.
    Graph {
        case: PathBuf,
        /// Edge-weight decay; omitted means the per-case median heuristic.
        #[arg(long, value_name = "A")]
        alpha: Option<f64>,
        /// Prune edges with weight at or below this.
        #[arg(long, value_name = "B", default_value_t = opfgnn::grid::DEFAULT_BETA)]
        beta: f64,
        /// Skip the spectral-radius rescale.
        #[arg(long)]
        no_normalize: bool,
        /// Write the kept edges as CSV (from_bus,to_bus,weight).
        #[arg(long, value_name = "PATH")]
        edges_out: Option<PathBuf>,
    },
    /// Draw a load dataset by scaling the case's reference demand.
    Sample {
        case: PathBuf,
        /// Number of samples to draw.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        /// Lower scaling bound per demand entry.
        #[arg(long, default_value_t = opfgnn::dataset::DEFAULT_LOW)]
        low: f64,
        /// Upper scaling bound per demand entry.
        #[arg(long, default_value_t = opfgnn::dataset::DEFAULT_HIGH)]
        high: f64,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train the network on a sampled dataset.
    Train {
        case: PathBuf,
        /// Dataset directory produced by `sample`.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Run config TOML; omitted means built-in defaults.
        #[arg(long, value_name = "CFG")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Solve every dataset sample with the per-instance baseline solver.
    Solve {
        case: PathBuf,
        /// Dataset directory produced by `sample`.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Run config TOML; omitted means built-in defaults.
        #[arg(long, value_name = "CFG")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Evaluate a trained checkpoint on a dataset.
    Eval {
        case: PathBuf,
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// Dataset directory produced by `sample`.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Baseline-solver output directory for cost comparison.
        #[arg(long, value_name = "DIR")]
        baseline: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Report feasibility of an externally supplied operating point.
    Check {
        case: PathBuf,
        /// State CSV: bus_id,p_demand,q_demand,p,q,v,delta (one row per bus).
        #[arg(long, value_name = "FILE")]
        state: PathBuf,
        /// Also write the feasibility report as JSON.
        #[arg(long, value_name = "PATH")]
        json_out: Option<PathBuf>,
    },
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(std::num::NonZeroUsize::get).unwrap_or(1)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let workers = match cli.workers {
        Some(0) => return Err(Failure::usage("--workers must be at least 1")),
        Some(w) => w,
        None => default_workers(),
    };
    match cli.command {
        Command::Parse { case, json_out } => commands::parse(&case, json_out.as_deref()),
        Command::Graph { case, alpha, beta, no_normalize, edges_out } => {
            commands::graph(&case, alpha, beta, !no_normalize, edges_out.as_deref())
        }
        Command::Sample { case, n, seed, low, high, out } => {
            commands::sample(&case, n, seed, low, high, &out)
        }
        Command::Train { case, data, config, out } => {
            commands::train(&case, &data, config.as_deref(), &out, workers)
        }
        Command::Solve { case, data, config, out } => {
            commands::solve(&case, &data, config.as_deref(), &out, workers)
        }
        Command::Eval { case, checkpoint, data, baseline, out } => {
            commands::eval(&case, &checkpoint, &data, baseline.as_deref(), &out)
        }
        Command::Check { case, state, json_out } => {
            commands::check(&case, &state, json_out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    // Clap itself exits with 2 on unknown flags or missing arguments.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.exit_code())
        }
    }
}
