//! `kbedit` — operator surface for the knowledge-block editing laboratory:
//! synthetic data generation, micro-LM pretraining, hypernetwork training,
//! evaluation, representation probes, and edit-layer selection.

mod commands;
mod manifest;

use clap::{Parser, Subcommand};
use commands::UsageError;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "kbedit", version, about = "Entity knowledge-block editing on a micro language model")]
struct Cli {
    /// Print failures as machine-readable JSON on stderr.
    #[arg(long, global = true)]
    error_json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic fact world plus training/evaluation datasets.
    GenData(commands::GenDataArgs),
    /// Pretrain the micro language model on a world's corpus.
    Pretrain(commands::PretrainArgs),
    /// Train an editing hypernetwork against a pretrained model.
    Train(commands::TrainArgs),
    /// Score a bundle: reliability, generality, locality, fluency, info gain.
    Eval(commands::EvalArgs),
    /// Layer-wise representation probe and knowledge-block swap experiment.
    Probe(commands::ProbeArgs),
    /// Train per-layer hypernetworks and recommend the best edit layer.
    LayerSelect(commands::LayerSelectArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(args) => commands::gen_data(args),
        Command::Pretrain(args) => commands::pretrain(args),
        Command::Train(args) => commands::train_cmd(args),
        Command::Eval(args) => commands::eval_cmd(args),
        Command::Probe(args) => commands::probe_cmd(args),
        Command::LayerSelect(args) => commands::layer_select(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let is_usage = err.downcast_ref::<UsageError>().is_some();
            let kind = if is_usage { "usage" } else { "runtime" };
            if cli.error_json {
                eprintln!(
                    "{}",
                    serde_json::json!({ "error": format!("{err:#}"), "kind": kind })
                );
            } else {
                eprintln!("error: {err:#}");
            }
            if is_usage {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
