//! `adcm`: train, inspect and evaluate adaptively discretized consistency models.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use adcm_core::trainer::config::keys_help;
use adcm_core::Error;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "adcm",
    version,
    about = "Consistency-model training with adaptive time grids"
)]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Train a model, writing checkpoints, a manifest and loss/schedule CSVs.
    Train(Common),
    /// Build one grid from a checkpoint (or a fresh model) and write schedule.csv.
    Schedule(Common),
    /// Generate samples from a checkpoint's EMA weights into samples.csv.
    Sample(Common),
    /// Report W2 metrics and the accumulated-error check for a checkpoint.
    Eval(Common),
    /// Compare the closed-form step against a brute-force mesh search.
    Oracle(Common),
    /// Render SVG plots from the CSVs in the output directory.
    ExportPlot(Common),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key (repeatable), applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "adcm-out")]
    pub out: PathBuf,
}

impl Verb {
    pub fn name(&self) -> &'static str {
        match self {
            Verb::Train(_) => "train",
            Verb::Schedule(_) => "schedule",
            Verb::Sample(_) => "sample",
            Verb::Eval(_) => "eval",
            Verb::Oracle(_) => "oracle",
            Verb::ExportPlot(_) => "export-plot",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Verb::Train(c)
            | Verb::Schedule(c)
            | Verb::Sample(c)
            | Verb::Eval(c)
            | Verb::Oracle(c)
            | Verb::ExportPlot(c) => c,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    Usage = 1,
    Config = 2,
    Runtime = 3,
    Io = 4,
}

impl ExitStatus {
    pub fn of(err: &Error) -> Self {
        match err {
            Error::Config(_) => ExitStatus::Config,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Checkpoint(_) => ExitStatus::Io,
            Error::Shape(_)
            | Error::NonFinite(_)
            | Error::Domain(_)
            | Error::DegenerateModel { .. }
            | Error::TrainingHalted { .. } => ExitStatus::Runtime,
        }
    }
}

fn command() -> clap::Command {
    let keys = format!("Config keys (default, meaning):\n{}", keys_help());
    let mut cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        let keys = keys.clone();
        cmd = cmd.mut_subcommand(name, move |s| s.after_help(keys));
    }
    cmd
}

fn main() -> ExitCode {
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitStatus::Success,
                _ => ExitStatus::Usage,
            };
            return ExitCode::from(code as u8);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(ExitStatus::Usage as u8);
        }
    };
    let status = match commands::run(&cli.verb) {
        Ok(()) => ExitStatus::Success,
        Err(e) => {
            eprintln!("event=error code={} message=\"{}\"", ExitStatus::of(&e) as u8, e);
            ExitStatus::of(&e)
        }
    };
    ExitCode::from(status as u8)
}
