//! `pirt`: data generation, training, embedding, evaluation, gradient checks
//! and ablations from the command line.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pirt_core::PirtError;

#[derive(Parser)]
#[command(name = "pirt", version, about = "Pose-guided part transformer for occluded re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags every command accepts.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Flat `key = value` run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the command's seed (data seed for gen-data, training seed otherwise).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory every output is written under.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic benchmark to a dataset directory.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes metrics.jsonl and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (overrides data.path).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Embed one split of a dataset with a trained checkpoint.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, query or gallery.
        #[arg(long)]
        split: String,
        /// Dataset directory (defaults to the checkpoint's data settings).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Rank query embeddings against gallery embeddings and score them.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
    },
    /// Finite-difference gradient checks on every layer and the full loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Train and compare the variants of one ablation axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// components, units or score_mode.
        #[arg(long)]
        axis: String,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
}

fn exit_code(e: &PirtError) -> u8 {
    if e.is_numeric() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { common } => commands::gen_data(&common),
        Command::Train { common, data, resume } => commands::train(&common, data, resume),
        Command::Embed {
            common,
            checkpoint,
            split,
            data,
        } => commands::embed(&common, &checkpoint, &split, data),
        Command::Eval { common, query, gallery } => commands::eval(&common, &query, &gallery),
        Command::Gradcheck { common } => commands::gradcheck(&common),
        Command::Ablate { common, axis, seeds } => commands::ablate(&common, &axis, &seeds),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
