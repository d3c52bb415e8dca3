use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sparsefocus_cli::commands::{
    cmd_ablate, cmd_eval, cmd_phantom, cmd_predict, cmd_train, AblateArgs, EvalArgs, PhantomArgs,
    PredictArgs, TrainArgs,
};
use sparsefocus_cli::{exit_code, thread_cap};

/// RoI-focused multi-task MR-to-CT synthesis on phantoms.
#[derive(Debug, Parser)]
#[command(name = "sparsefocus", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a phantom dataset with train/val/test splits.
    Phantom(PhantomArgs),
    /// Train one variant.
    Train(TrainArgs),
    /// Predict aggregated sCT planes with a trained model.
    Predict(PredictArgs),
    /// Region-wise evaluation of predictions against references.
    Eval(EvalArgs),
    /// Train, predict and evaluate every (variant, seed) pair.
    Ablate(AblateArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = thread_cap()? {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Phantom(a) => cmd_phantom(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(mut a) => {
            if let Some(n) = thread_cap()? {
                a.jobs = a.jobs.min(n);
            }
            cmd_ablate(&a)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
