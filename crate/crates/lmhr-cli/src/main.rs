//! Command-line surface: synth, train, evaluate, inspect-retrieval,
//! dump-attention, report.
//!
//! Exit codes: 0 success, 2 usage/config/data errors, 3 numeric failures.

mod commands;

use clap::{Args, Parser, Subcommand};
use lmhr::LmhrError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "lmhr", version, about = "Long-history retrieval-augmented forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML config file; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// dataset path override
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// output directory override
    #[arg(long)]
    out: Option<PathBuf>,
    /// drop the transformer aggregator branch
    #[arg(long)]
    no_aggregator: bool,
    /// drop the last-segment representation branch
    #[arg(long)]
    no_hp_branch: bool,
    /// drop the spatial-temporal backend branch
    #[arg(long)]
    no_stgnn: bool,
    /// skip graph structure learning and reuse the retrieval adjacency
    #[arg(long)]
    no_graph_learning: bool,
    /// non-overlapping segmentation (stride = segment length)
    #[arg(long)]
    hard_break: bool,
    /// backend implementation: reference | none
    #[arg(long)]
    backend: Option<String>,
    /// graph-loss weight
    #[arg(long)]
    lambda: Option<f64>,
    /// Gumbel-softmax temperature
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset plus its ground-truth manifest
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// generator preset: default | lagged | pure
        #[arg(long, default_value = "default")]
        preset: String,
        #[arg(long, default_value_t = 8)]
        nodes: usize,
        #[arg(long, default_value_t = 4000)]
        steps: usize,
        #[arg(long, default_value_t = 2)]
        groups: usize,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train a model and write the best-validation checkpoint
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint on the test split
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Dump retrieval provenance and raw slices for one (sample, node)
    InspectRetrieval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        node: usize,
    },
    /// Dump the aggregator's target-row attention for one (sample, node)
    DumpAttention {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        node: usize,
    },
    /// Compare two evaluation outputs (Table-style improvement columns)
    Report {
        /// metrics.json of the baseline run
        #[arg(long)]
        baseline: PathBuf,
        /// metrics.json of the model run
        #[arg(long)]
        model: PathBuf,
        /// output CSV path
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth {
            config,
            preset,
            nodes,
            steps,
            groups,
            noise,
        } => commands::cmd_synth(&config, &preset, nodes, steps, groups, noise),
        Command::Train { config } => commands::cmd_train(&config),
        Command::Evaluate { config, checkpoint } => commands::cmd_evaluate(&config, &checkpoint),
        Command::InspectRetrieval {
            config,
            checkpoint,
            sample,
            node,
        } => commands::cmd_inspect_retrieval(&config, &checkpoint, sample, node),
        Command::DumpAttention {
            config,
            checkpoint,
            sample,
            node,
        } => commands::cmd_dump_attention(&config, &checkpoint, sample, node),
        Command::Report {
            baseline,
            model,
            out,
        } => commands::cmd_report(&baseline, &model, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                LmhrError::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
