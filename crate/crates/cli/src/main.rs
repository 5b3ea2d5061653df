//! `wsforge`: run the adapter-generation pipeline or any single stage of it.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "wsforge", version, about = "Generate LoRA adapters with latent diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment config (JSON). Missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if needed.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic teacher dataset directory.
    GenData(Common),
    /// Norm-balance every adapter of a dataset and export a few as .wsf.
    Reparam(Common),
    /// Fit PCA on the training split and write the explained-variance curve.
    Pca(Common),
    /// Train the VAE compressor.
    TrainVae(Common),
    /// Train the conditional denoiser in the compressed space.
    TrainDiff(Common),
    /// Sample adapters for the held-out conditions.
    Sample(Common),
    /// Score samples against the teacher.
    Eval(Common),
    /// Run every stage end to end.
    Pipeline(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(c) => commands::gen_data(&c),
        Command::Reparam(c) => commands::reparam(&c),
        Command::Pca(c) => commands::pca(&c),
        Command::TrainVae(c) => commands::train_vae(&c),
        Command::TrainDiff(c) => commands::train_diff(&c),
        Command::Sample(c) => commands::sample(&c),
        Command::Eval(c) => commands::eval(&c),
        Command::Pipeline(c) => commands::pipeline(&c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
