mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Environment variable naming the output root; `--out` takes precedence.
const OUT_ENV: &str = "PROMPTCODE_OUT";

#[derive(Parser)]
#[command(name = "promptcode", version, about = "Prompt tuning for code tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/validation/test JSONL files from a dialect spec or raw input.
    PrepareData(Args),
    /// MLM-pretrain the built-in backbone.
    Pretrain(Args),
    /// Prompt-tune on the source language and evaluate on the target.
    Train(Args),
    /// Evaluate a saved prompt checkpoint on the target test set.
    Eval(Args),
    /// Run a placement / prompt-count / source-language sweep.
    Ablate(Args),
}

#[derive(clap::Args)]
struct Args {
    /// TOML config file.
    config: PathBuf,
    /// Output root; relative paths inside the config resolve against it.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Command failure, split by exit code.
#[derive(Debug)]
pub enum Failure {
    Input(anyhow::Error),
    Invariant(anyhow::Error),
}

impl From<promptcode::Error> for Failure {
    fn from(e: promptcode::Error) -> Self {
        match e {
            promptcode::Error::Invariant(_) | promptcode::Error::NonFinite(_) => {
                Failure::Invariant(e.into())
            }
            other => Failure::Input(other.into()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Input(e.into())
    }
}

type Handler = fn(&commands::Context) -> Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (args, run): (&Args, Handler) = match &cli.command {
        Command::PrepareData(a) => (a, commands::prepare_data),
        Command::Pretrain(a) => (a, commands::pretrain),
        Command::Train(a) => (a, commands::train),
        Command::Eval(a) => (a, commands::eval),
        Command::Ablate(a) => (a, commands::ablate),
    };
    let root = args
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let ctx = commands::Context {
        config: args.config.clone(),
        root,
    };
    match run(&ctx) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Invariant(e)) => {
            eprintln!("invariant violated: {e:#}");
            ExitCode::from(3)
        }
    }
}
