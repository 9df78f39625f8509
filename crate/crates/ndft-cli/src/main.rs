use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ndft_cli::commands::{self, EvalArgs, ExportArgs, GradcheckArgs, GridArgs, ProbeArgs, TrainArgs, TransferArgs};

/// Nuisance-disentangled feature training experiments.
#[derive(Parser)]
#[command(name = "ndft", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write metrics plus a final checkpoint.
    Train {
        /// Configuration file (defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Experiment seed; every random stream derives from it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (manifest, metrics.jsonl, final.ckpt).
        #[arg(long, default_value = "run-out")]
        out: PathBuf,
        /// Resume from a checkpoint written by an earlier train run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also flatten the metrics stream to metrics.csv.
        #[arg(long)]
        csv: bool,
    },
    /// Evaluate a checkpoint on one partition.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// train | val-seen | val-unseen
        #[arg(long, default_value = "val-seen")]
        partition: String,
        #[arg(long, default_value_t = 600)]
        samples: usize,
    },
    /// Train fresh leakage probes against a checkpoint's frozen trunk.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Probe a single factor index (all factors when omitted).
        #[arg(long)]
        factor: Option<usize>,
        /// Write the probe results as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the nuisance-subset ablation grid.
    Grid {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of seeds per cell (seed, seed+1, …).
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// "all" or a semicolon list of factor-initial subsets
        /// (e.g. "none;A;V;W;A+V+W").
        #[arg(long, default_value = "all")]
        subsets: String,
        /// γ applied to each factor inside a subset.
        #[arg(long, default_value_t = 0.01)]
        gamma: f64,
        #[arg(long, default_value = "grid-out")]
        out: PathBuf,
        /// Skip the per-cell leakage probes.
        #[arg(long)]
        no_probes: bool,
    },
    /// Frozen-trunk retargeting onto the shifted generator.
    Transfer {
        /// Checkpoint whose trunk is transferred.
        #[arg(long)]
        source: PathBuf,
        /// Optional comparison checkpoint (same protocol).
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 800)]
        retrain_iters: u64,
    },
    /// Finite-difference check of every op and loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        points: usize,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Render a fixed sample set to the flat binary container.
    ExportData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "train")]
        partition: String,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value = "dataset-out")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, seed, out, resume, csv } => {
            commands::train(&TrainArgs { config, seed, out, resume, csv })
        }
        Command::Eval { checkpoint, config, seed, partition, samples } => {
            commands::eval(&EvalArgs { checkpoint, config, seed, partition, samples })
        }
        Command::Probe { checkpoint, config, seed, factor, out } => {
            commands::probe(&ProbeArgs { checkpoint, config, seed, factor, out })
        }
        Command::Grid { config, seed, seeds, subsets, gamma, out, no_probes } => {
            commands::grid(&GridArgs { config, seed, seeds, subsets, gamma, out, probes: !no_probes })
        }
        Command::Transfer { source, baseline, config, seed, retrain_iters } => {
            commands::transfer(&TransferArgs { source, baseline, config, seed, retrain_iters })
        }
        Command::Gradcheck { seed, points, step, tolerance } => {
            commands::run_gradcheck(&GradcheckArgs { seed, points, step, tolerance })
        }
        Command::ExportData { config, seed, partition, count, out } => {
            commands::export_data(&ExportArgs { config, seed, partition, count, out })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            // Config problems get their own exit code so scripted sweeps can
            // tell a typo from a failed run.
            let msg = format!("{err:#}");
            if msg.contains("unknown key")
                || msg.contains("unknown section")
                || msg.contains("config")
                || msg.contains("[train]")
                || msg.contains("[data]")
            {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
