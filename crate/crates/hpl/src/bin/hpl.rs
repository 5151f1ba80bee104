//! `hpl`: experiment driver for hierarchical predictive learning.
//!
//! The binary is a thin argument parser; all behavior lives in the
//! library's `cli` module.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hpl::cli::{self, Command, Invocation};

#[derive(Parser)]
#[command(
    name = "hpl",
    about = "Learn GP strategies from stored task executions and run them \
             under a shifting-horizon MPC with a safety fallback",
    version
)]
struct Args {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a demonstration corpus for the training task instances.
    DemoGen(CommonFlags),
    /// Build the GP dataset from stored demonstrations and train the strategy.
    Train(CommonFlags),
    /// Run the learned policy on one held-out task instance.
    Run(CommonFlags),
    /// Benchmark the policy against the safety controller and demonstrator.
    Eval(CommonFlags),
    /// Certify the shipped safe set by sampled forward rollouts.
    VerifySafe(CommonFlags),
}

#[derive(clap::Args)]
struct CommonFlags {
    /// JSON configuration file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed all random substreams derive from.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Environment family.
    #[arg(long, value_parser = ["tube", "track", "flappy", "tube-sharp"])]
    env: Option<String>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let (command, flags) = match args.command {
        Cmd::DemoGen(f) => (Command::DemoGen, f),
        Cmd::Train(f) => (Command::Train, f),
        Cmd::Run(f) => (Command::Run, f),
        Cmd::Eval(f) => (Command::Eval, f),
        Cmd::VerifySafe(f) => (Command::VerifySafe, f),
    };
    let invocation = Invocation {
        command,
        config: flags.config,
        seed: flags.seed,
        out: flags.out,
        env: flags.env,
    };
    match cli::execute(&invocation) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
