//! Command-line front end: argument parsing and subcommand dispatch.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "re3qa", version, about = "Unified retrieve, read and rerank question answering")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// TOML file with configuration keys; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    Gen(CommonArgs),
    /// Train a model on the train split.
    Train(CommonArgs),
    /// Predict answers for a split.
    Predict(CommonArgs),
    /// Evaluate the full model and its ablations.
    Eval(CommonArgs),
    /// Compare block passes of the shared encoder and a separate pipeline.
    Bench(CommonArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(CommonArgs),
    /// Train and evaluate one model per early-exit depth.
    SweepJ(CommonArgs),
}

impl Command {
    fn args(&self) -> &CommonArgs {
        match self {
            Command::Gen(a)
            | Command::Train(a)
            | Command::Predict(a)
            | Command::Eval(a)
            | Command::Bench(a)
            | Command::Gradcheck(a)
            | Command::SweepJ(a) => a,
        }
    }
}

/// Resolves the configuration and runs the command, returning written files.
pub fn run(cli: &Cli) -> anyhow::Result<Vec<PathBuf>> {
    let args = cli.command.args();
    let cfg = RunConfig::resolve(args.config.as_deref(), &args.overrides)?;
    match cli.command {
        Command::Gen(_) => commands::gen(&cfg),
        Command::Train(_) => commands::train_cmd(&cfg),
        Command::Predict(_) => commands::predict_cmd(&cfg),
        Command::Eval(_) => commands::eval_cmd(&cfg),
        Command::Bench(_) => commands::bench_cmd(&cfg),
        Command::Gradcheck(_) => commands::gradcheck_cmd(&cfg),
        Command::SweepJ(_) => commands::sweep_j_cmd(&cfg),
    }
}
