//! Command-line experiment runner for `scaleladder`.
//!
//! Exit codes: 0 success, 1 a checked property failed, 2 configuration or
//! input error, 3 a resource cap was hit.

pub mod commands;
pub mod config;
pub mod verify;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::Context;
use crate::config::{ExperimentConfig, Overrides};

pub const EXIT_OK: u8 = 0;
pub const EXIT_PROPERTY: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RESOURCE: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "scaleladder", version, about = "Multiscale entropic training experiments")]
pub struct Cli {
    /// JSON configuration; every field has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out.directory`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run seed (overrides `train.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Train only the first K levels (overrides `train.stop_after`).
    #[arg(long, global = true, value_name = "K")]
    pub stop_after: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-level scales, budgets, temperatures and set sizes.
    Ladder,
    /// Rung residual curves and their certificates.
    Decompose,
    /// Draw a dataset.
    Sample,
    /// Draw a dataset and train on it.
    Train {
        /// Continue from the trace in this directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Risks and bounds of a trained model.
    Evaluate {
        /// Model file (default: `<out>/model.json`).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run property suites.
    Verify {
        #[arg(value_enum, default_value_t = Suite::All)]
        suite: Suite,
    },
    /// Ratio of the corollary bound to the ERM bound, plus a bound sweep.
    Ratio {
        #[arg(long)]
        r_bar: Option<f64>,
        #[arg(long)]
        d: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Entropy,
    Ladder,
    Congruency,
    Bounds,
    All,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Entropy => "entropy",
            Suite::Ladder => "ladder",
            Suite::Congruency => "congruency",
            Suite::Bounds => "bounds",
            Suite::All => "all",
        }
    }
}

/// Runs the parsed command and returns the process exit code.
pub fn run(cli: Cli) -> u8 {
    match execute(cli) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_PROPERTY,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn execute(cli: Cli) -> anyhow::Result<bool> {
    let overrides = Overrides {
        out: cli.out,
        seed: cli.seed,
        stop_after: cli.stop_after,
    };
    let config = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    let ctx = Context::new(config)?;
    match cli.command {
        Command::Ladder => commands::cmd_ladder(&ctx),
        Command::Decompose => commands::cmd_decompose(&ctx),
        Command::Sample => commands::cmd_sample(&ctx),
        Command::Train { resume } => commands::cmd_train(&ctx, resume.as_deref()),
        Command::Evaluate { model } => commands::cmd_evaluate(&ctx, model.as_deref()),
        Command::Verify { suite } => {
            let report = verify::run_suites(&ctx, suite)?;
            scaleladder::io::write_json(&ctx.out_dir().join(verify::VERIFY_REPORT), &report)?;
            ctx.write_manifest("verify", serde_json::json!({ "suite": suite.name() }))?;
            println!("{} checks, all passed: {}", report.checks.len(), report.pass);
            Ok(report.pass)
        }
        Command::Ratio { r_bar, d } => commands::cmd_ratio(&ctx, r_bar, d),
    }
}

/// Resource caps map to 3; everything else that is not a property failure to 2.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<scaleladder::Error>() {
            return match err {
                scaleladder::Error::EnumerationTooLarge { .. } | scaleladder::Error::TooLarge(_) => EXIT_RESOURCE,
                _ => EXIT_CONFIG,
            };
        }
    }
    EXIT_CONFIG
}
