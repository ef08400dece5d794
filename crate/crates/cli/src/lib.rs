//! Command-line front end: `seeds`, `extract`, `fuzz`, `bench`, `replay`.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::Exit;
pub use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "heterofuzz", version, about = "Differential fuzzing of host and device simulator backends")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and validate a seed corpus
    Seeds,
    /// Trace the seed corpus and write a subsystem manifest
    Extract,
    /// Run one fuzzing campaign
    Fuzz,
    /// Run all three mutation modes under one budget and tabulate them
    Bench {
        /// Also run kernel_sensitive against the shipped or given manifest
        #[arg(long)]
        with_manifest: bool,
    },
    /// Re-execute recorded iterations and check their verdicts
    Replay {
        transcript: PathBuf,
        /// Replay only this record index
        #[arg(long, conflicts_with = "sample")]
        iteration: Option<usize>,
        /// Number of records drawn at random
        #[arg(long, default_value_t = 100)]
        sample: usize,
    },
}

/// Runs a parsed command line and returns the process exit status.
pub fn run(cli: Cli) -> i32 {
    let result = RunConfig::from_overrides(&cli.overrides).and_then(|cfg| match cli.command {
        Command::Seeds => commands::cmd_seeds(&cfg),
        Command::Extract => commands::cmd_extract(&cfg),
        Command::Fuzz => commands::cmd_fuzz(&cfg),
        Command::Bench { with_manifest } => commands::cmd_bench(&cfg, with_manifest),
        Command::Replay {
            transcript,
            iteration,
            sample,
        } => commands::cmd_replay(&cfg, &transcript, iteration, sample),
    });
    match result {
        Ok(exit) => exit as i32,
        Err(e) => {
            eprintln!("error: {e:#}");
            Exit::Usage as i32
        }
    }
}
