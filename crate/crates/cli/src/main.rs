//! `scop` — train and evaluate contextual knowledge-graph models.
//!
//! The pipeline has two training phases (pretrain on triple classification
//! over the whole graph, then finetune on a downstream pair task) plus
//! dataset construction, ranking evaluation, threshold-robustness analysis,
//! and a finite-difference gradient audit.

mod artifacts;
mod commands;
mod settings;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use settings::CommonOpts;

#[derive(Parser)]
#[command(
    name = "scop",
    version,
    about = "Knowledge-graph representation learning with contextual pretraining",
    after_help = "Graph inputs (--kg) are tab-separated `head<TAB>relation<TAB>tail` files. \
                  The names synth:toy, synth:mini, and synth:wn-all generate built-in corpora."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract a pair task from a graph and write its splits as a directory
    BuildDataset {
        /// Source graph: a TSV path or a synth: corpus name
        #[arg(long)]
        kg: String,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Train a model on triple classification over the whole graph
    Pretrain {
        /// Training graph: a TSV path or a synth: corpus name
        #[arg(long)]
        kg: String,
        /// Output directory (checkpoint, loss log, run config)
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Continue training a checkpoint on a downstream task
    Finetune {
        /// Graph to split on the fly (alternative to --data)
        #[arg(long)]
        kg: Option<String>,
        /// Dataset directory written by build-dataset (alternative to --kg)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to start from
        #[arg(long)]
        ckpt: PathBuf,
        /// Output directory (checkpoint, loss log, run config)
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Rank candidate tails for held-out pairs and report MRR / Hits@k
    Evaluate {
        /// Graph to split on the fly (alternative to --data)
        #[arg(long)]
        kg: Option<String>,
        /// Dataset directory written by build-dataset (alternative to --kg)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to score with
        #[arg(long)]
        ckpt: PathBuf,
        /// Output directory (eval.json, run config)
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Sweep decision margins and export the score distribution
    Analyze {
        /// Graph to split on the fly (alternative to --data)
        #[arg(long)]
        kg: Option<String>,
        /// Dataset directory written by build-dataset (alternative to --kg)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to score with
        #[arg(long)]
        ckpt: PathBuf,
        /// Output directory (sweep.json, distribution.csv, run config)
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Audit analytic gradients against central finite differences
    Gradcheck {
        /// Maximum acceptable relative error (default 1e-3)
        #[arg(long)]
        tolerance: Option<f64>,
        /// Optional output directory for gradcheck.json
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: CommonOpts,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::BuildDataset { kg, out, common } => commands::build_dataset(kg, out, common),
        Command::Pretrain { kg, out, common } => commands::pretrain(kg, out, common),
        Command::Finetune { kg, data, ckpt, out, common } => {
            commands::finetune(kg.as_deref(), data.as_deref(), ckpt, out, common)
        }
        Command::Evaluate { kg, data, ckpt, out, common } => {
            commands::evaluate(kg.as_deref(), data.as_deref(), ckpt, out, common)
        }
        Command::Analyze { kg, data, ckpt, out, common } => {
            commands::analyze(kg.as_deref(), data.as_deref(), ckpt, out, common)
        }
        Command::Gradcheck { tolerance, out, common } => {
            commands::gradcheck(*tolerance, out.as_deref(), common)
        }
    }
}
