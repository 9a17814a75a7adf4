mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{AblateArgs, EvalArgs, GenDataArgs, GradcheckArgs, TrainArgs};

/// Attention-gated embedding networks: synthetic data, triplet training,
/// retrieval evaluation, gradient checks and gate-mode ablations.
#[derive(Debug, Parser)]
#[command(name = "vamkit", version)]
struct Cli {
    /// Worker threads; falls back to VAMKIT_THREADS, then to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic shop/consumer dataset.
    GenData(GenDataArgs),
    /// Train a network on a dataset's training split.
    Train(TrainArgs),
    /// Top-k retrieval accuracy of a checkpoint on a dataset's test split.
    Eval(EvalArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate each gate mode over several seeds.
    Ablate(AblateArgs),
}

/// Exit status: 0 success, 1 check or run failure, 2 usage or environment.
pub enum Outcome {
    Success,
    CheckFailed,
}

fn thread_count(flag: Option<usize>) -> anyhow::Result<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("VAMKIT_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| anyhow::anyhow!(commands::UsageError(format!("VAMKIT_THREADS={v:?} is not a thread count")))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            anyhow::bail!(commands::UsageError("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Ablate(a) => commands::ablate(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
