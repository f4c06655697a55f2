//! Command-line front end for the hierarchical mixture classifier: dataset
//! synthesis, hierarchy construction, training, evaluation, and assignment
//! inspection as reproducible runs.
//!
//! Every subcommand takes `--out DIR` and echoes its fully-resolved
//! configuration to `DIR/config.json`; feeding that file back through
//! `--config` replays the run, and explicit flags override config-file
//! values. All randomness flows from `--seed` through named sub-streams.
//!
//! Exit codes: 0 success, 1 invalid flags/config/inputs, 2 runtime failure.

mod build_hierarchy;
mod common;
mod eval;
mod inspect;
mod synth;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Flags every subcommand shares.
#[derive(clap::Args, Debug)]
pub struct Shared {
    /// Run directory for artifacts (created if missing).
    #[arg(long)]
    pub out: PathBuf,

    /// JSON config with the same keys as the echoed config.json; explicit
    /// flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Root random seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Parser)]
#[command(
    name = "hiermix",
    version,
    about = "Hierarchical mixture classifier: data, trees, training, reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clustered dataset with a known planted grouping.
    Synth {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        args: synth::SynthArgs,
    },
    /// Cluster classes into a level structure and initialize assignments.
    BuildHierarchy {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        args: build_hierarchy::BuildHierarchyArgs,
    },
    /// Train the mixture classifier, optionally adapting assignments.
    Train {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        args: train::TrainArgs,
    },
    /// Score a dataset with a trained checkpoint.
    Eval {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        args: eval::EvalArgs,
    },
    /// Report group memberships and adaptation-induced reassignments.
    Inspect {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        args: inspect::InspectArgs,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version are successful outcomes; everything else is
            // a usage problem.
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Synth { shared, args } => synth::run(shared, args),
        Command::BuildHierarchy { shared, args } => build_hierarchy::run(shared, args),
        Command::Train { shared, args } => train::run(shared, args),
        Command::Eval { shared, args } => eval::run(shared, args),
        Command::Inspect { shared, args } => inspect::run(shared, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message);
            ExitCode::from(err.code)
        }
    }
}
