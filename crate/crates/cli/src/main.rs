//! `dmm`: dataset generation, training, evaluation, verification, parameter
//! counting and scan benchmarks driven by one config file.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "dmm", version, about = "Token-mixer decision model toolkit")]
struct Cli {
    /// Flat `key = value` config file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint to evaluate (defaults to `<out>/model.ckpt`).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory, overriding `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed, overriding `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the offline dataset for the configured environment.
    GenData,
    /// Train a model and write metrics, checkpoints and a manifest.
    Train,
    /// Roll out a checkpoint and write an evaluation report.
    Eval,
    /// Run every invariant suite and print a per-suite table.
    Verify,
    /// Print the parameter breakdown of the configured model.
    CountParams,
    /// Time sequential against parallel scans.
    BenchScan,
    /// Print the effective configuration.
    ShowConfig,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = commands::load_config(cli.config.as_deref())?;
    commands::apply_overrides(&mut cfg, cli.out, cli.seed);
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Eval => commands::eval(&cfg, cli.checkpoint.as_deref()),
        Command::Verify => commands::verify(&cfg),
        Command::CountParams => commands::count_params(&cfg),
        Command::BenchScan => commands::bench_scan(&cfg),
        Command::ShowConfig => {
            print!("{}", cfg.to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
