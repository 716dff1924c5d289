//! `idinject` command-line tool.
//!
//! Exit codes: 0 success, 1 computational failure, 2 usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failure(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Failure(m) => write!(f, "error: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "idinject", version, about = "Multi-subject identity conditioning toolkit")]
struct Cli {
    /// TOML run config; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the token layout of an identity prompt.
    Layout(commands::LayoutArgs),
    /// Print the 3D-RoPE index of every token of an identity prompt.
    RopeDump(commands::LayoutArgs),
    /// Train the toy denoiser and write a checkpoint directory.
    DemoTrain(commands::TrainArgs),
    /// Sample a latent video from a checkpoint.
    DemoGenerate(commands::GenerateArgs),
    /// Evaluate identity retention and per-frame conditioning of a checkpoint.
    DemoEval(commands::EvalArgs),
    /// Consolidate per-frame subject observations into consistent subjects.
    Consolidate(commands::ConsolidateArgs),
    /// Identity similarity, temporal consistency and Fréchet distance of feature dumps.
    Metrics(commands::MetricsArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = config::RunConfig::load(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::Layout(a) => commands::layout(&a, &cfg),
        Cmd::RopeDump(a) => commands::rope_dump(&a, &cfg),
        Cmd::DemoTrain(a) => {
            cfg.apply(&a.overrides)?;
            commands::demo_train(&a, &cfg)
        }
        Cmd::DemoGenerate(a) => commands::demo_generate(&a, &cfg),
        Cmd::DemoEval(a) => commands::demo_eval(&a, &cfg),
        Cmd::Consolidate(a) => commands::consolidate(&a, &cfg),
        Cmd::Metrics(a) => commands::metrics(&a, &cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
