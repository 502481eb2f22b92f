mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "maskflow", version, about = "Rectified-flow portrait editing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic text-to-mask portrait set.
    Dataset(commands::DatasetArgs),
    /// Train the text-to-mask locator.
    TrainPasl(commands::TrainArgs),
    /// Mask IoU of a checkpoint on the validation split.
    EvalPasl(commands::EvalArgs),
    /// Edit one image.
    Edit(commands::EditArgs),
    /// Ablation grid over T and fusion strategy.
    Sweep(commands::SweepArgs),
    /// AttrEdit / AttrPreserve and image metrics from a JSONL record file.
    Metrics(commands::MetricsArgs),
    /// Parameter and FLOP table of the locator.
    Complexity(commands::ComplexityArgs),
    /// Train and evaluate the 2-D rectified-flow demo.
    RfDemo2d(commands::Demo2dArgs),
    /// Invert an image to its noise latent.
    Invert(commands::InvertArgs),
    /// Denoise a latent back to an image.
    Denoise(commands::DenoiseArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Dataset(a) => commands::dataset(a),
        Command::TrainPasl(a) => commands::train_pasl(a),
        Command::EvalPasl(a) => commands::eval_pasl(a),
        Command::Edit(a) => commands::edit(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Metrics(a) => commands::metrics(a),
        Command::Complexity(a) => commands::complexity(a),
        Command::RfDemo2d(a) => commands::demo2d(a),
        Command::Invert(a) => commands::invert(a),
        Command::Denoise(a) => commands::denoise(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
