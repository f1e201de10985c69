//! `sbglm`: configuration-driven batch pipeline.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod dataset;
mod error;
mod manifest;
mod stages;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::{Overrides, PipelineConfig};
use error::CliResult;
use stages::{Runner, Status};

#[derive(Debug, Parser)]
#[command(name = "sbglm", version, about = "Longitudinal surface-based spatial Bayesian GLM pipeline")]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true, default_value = "sbglm.json")]
    config: PathBuf,
    /// Rerun stages even when their manifests are current.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (overrides the config).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Seed for excursion sampling and simulation (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Info)]
    log_level: LogLevel,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Scale, scrub and residualize every session.
    Prep,
    /// Fit the spatial model per subject, pooling its visits.
    Fit,
    /// Excursion sets and classical maps, reduced to activation areas.
    Excur,
    /// Reliability and method-comparison tables.
    Summarize,
    /// Mixed models of activation area on disability.
    Lmm,
    /// Write a synthetic dataset into the configured data directory.
    Simulate,
    /// Run prep through lmm and write the report table.
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LogLevel {
    Off,
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

impl From<LogLevel> for log::LevelFilter {
    fn from(l: LogLevel) -> Self {
        match l {
            LogLevel::Off => log::LevelFilter::Off,
            LogLevel::Error => log::LevelFilter::Error,
            LogLevel::Warn => log::LevelFilter::Warn,
            LogLevel::Info => log::LevelFilter::Info,
            LogLevel::Debug => log::LevelFilter::Debug,
            LogLevel::Trace => log::LevelFilter::Trace,
        }
    }
}

/// Prints a progress line; a closed stdout is not an error.
fn say(line: &str) {
    let _ = writeln!(std::io::stdout(), "{line}");
}

fn announce(stage: &str, status: Status) {
    match status {
        Status::Ran => say(&format!("{stage}: done")),
        Status::UpToDate => say(&format!("{stage}: up to date")),
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    let overrides = Overrides { workers: cli.workers, seed: cli.seed };
    let cfg = PipelineConfig::load(&cli.config, &overrides)?;
    let runner = Runner::new(cfg, cli.force)?;
    runner.echo_config()?;
    let stage = |name: &str| -> CliResult<()> {
        let status = match name {
            "prep" => runner.prep(),
            "fit" => runner.fit(),
            "excur" => runner.excur(),
            "summarize" => runner.summarize(),
            "lmm" => runner.lmm(),
            "simulate" => runner.simulate(),
            _ => unreachable!("unknown stage {name}"),
        }?;
        announce(name, status);
        Ok(())
    };
    match cli.command {
        Command::Prep => stage("prep"),
        Command::Fit => stage("fit"),
        Command::Excur => stage("excur"),
        Command::Summarize => stage("summarize"),
        Command::Lmm => stage("lmm"),
        Command::Simulate => stage("simulate"),
        Command::All => {
            for s in stages::STAGES {
                stage(s)?;
            }
            let (path, rows) = runner.report()?;
            say(&format!("report: {}", path.display()));
            for r in rows {
                say(&format!("  {:<24} {:<8} {}", r.check, r.status, r.value));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level.into()).format_timestamp(None).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sbglm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
