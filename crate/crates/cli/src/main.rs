//! `dbcontrol` command-line workbench.
//!
//! Exit codes: 0 success, 1 invalid input, 2 data not persistently exciting,
//! 3 infeasible, 4 numerical failure.

// Checks such as `!(x > 0.0)` are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod bench;
mod config;
mod experiment;
mod simulate;
mod synth;
mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dbcontrol::convex::sdp::TOL_ENV;
use dbcontrol::{Error, Mat, Result};
use serde::Serialize;

use crate::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "dbcontrol", version, about = "Data-based state-feedback synthesis workbench")]
#[command(after_help = format!("The default solver tolerance can be overridden with {TOL_ENV}."))]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an experiment, write the trajectory CSV and check excitation.
    Simulate,
    /// Synthesize a gain with the configured procedure.
    Synth,
    /// Check a gain against data, a model or a target spectrum.
    Verify(verify::VerifyArgs),
    /// Run the Monte Carlo benchmark.
    Bench,
}

pub(crate) fn rows(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Validation("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.experiment.seed = s;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<i32> {
    match &cli.cmd {
        Command::Verify(args) => verify::run(args, cli.out.as_deref()),
        cmd => {
            let cfg = load_config(cli)?;
            let out = cfg.out_dir(cli.out.as_deref());
            match cmd {
                Command::Simulate => simulate::run(&cfg, &out),
                Command::Synth => synth::run(&cfg, &out),
                Command::Bench => bench::run(&cfg, &out),
                Command::Verify(_) => unreachable!(),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
