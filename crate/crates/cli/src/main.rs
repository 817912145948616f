//! `ugp`: degradation, training, inference and evaluation from the shell.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::LazyLock;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use commands::{
    AblateArgs, DegradeArgs, EvaluateArgs, GridArgs, InferArgs, KernelsArgs, ToyArgs, TrainArgs,
};

static VERSION: LazyLock<String> = LazyLock::new(|| {
    format!(
        "{} (ugp-core {}, config schema {})",
        env!("CARGO_PKG_VERSION"),
        ugp_core::VERSION,
        ugp_core::trainer::CONFIG_SCHEMA
    )
});

#[derive(Parser, Debug)]
#[command(name = "ugp", about = "Generative-prior image restoration toolkit")]
struct Cli {
    /// JSON file with option values; flags given on the command line win.
    #[arg(long, global = true, value_name = "JSON")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Degrade a directory of clean images and write a manifest.
    Degrade(DegradeArgs),
    /// Generate a bank of random motion-blur kernels.
    Kernels(KernelsArgs),
    /// Train one stage of the pipeline.
    Train(TrainArgs),
    /// Restore images with a trained fusion checkpoint.
    Infer(InferArgs),
    /// Compare predicted images against references.
    Evaluate(EvaluateArgs),
    /// Tile input, restoration, synthesis, fused output and reference per sample.
    Grid(GridArgs),
    /// Train and evaluate the three ablation presets.
    Ablate(AblateArgs),
    /// Render a toy face corpus with blurred copies and train/test manifests.
    Toy(ToyArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match Cli::command().version(VERSION.as_str()).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = cli.config.as_deref();
    match cli.command {
        Command::Degrade(a) => commands::degrade(a, cfg),
        Command::Kernels(a) => commands::kernels(a, cfg),
        Command::Train(a) => commands::train(a, cfg),
        Command::Infer(a) => commands::infer(a, cfg),
        Command::Evaluate(a) => commands::evaluate(a, cfg),
        Command::Grid(a) => commands::grid(a, cfg),
        Command::Ablate(a) => commands::ablate(a, cfg),
        Command::Toy(a) => commands::toy(a, cfg),
    }
}
