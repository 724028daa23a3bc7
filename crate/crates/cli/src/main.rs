//! Batch experiment runner: `run` executes the configured pipeline and
//! writes CSV results; `verify` prints model-based cross-checks.

mod config;
mod pipeline;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "relqr",
    version,
    about = "Data-driven LQR learning and distributed stabilization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline described by a scenario config
    Run {
        /// Path to the JSON scenario config
        config: PathBuf,
        /// Output directory (overrides the config)
        #[arg(long)]
        output: Option<PathBuf>,
        /// Excitation seed (overrides the config)
        #[arg(long)]
        seed: Option<u64>,
        /// Suppress progress output
        #[arg(long)]
        quiet: bool,
    },
    /// Print model-based oracle results for the configured plant
    Verify {
        /// Path to the JSON scenario config
        config: PathBuf,
        /// Directory holding gains.csv from an earlier run
        #[arg(long)]
        output: Option<PathBuf>,
        /// Suppress progress output
        #[arg(long)]
        quiet: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run {
            config,
            output,
            seed,
            quiet,
        } => pipeline::run(&config, output.as_deref(), seed, quiet),
        Command::Verify {
            config,
            output,
            quiet,
        } => pipeline::verify(&config, output.as_deref(), quiet),
    };
    std::process::exit(code);
}
