//! `ancde`: train, evaluate and inspect attentive neural CDE models.
//!
//! Exit codes: 0 success, 1 failed gradient check, 2 configuration, schema
//! or shape errors, 3 numerical abort during training.

mod commands;
mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use ancde::train::Metric;
use clap::{Parser, Subcommand};

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn config(message: String) -> Self {
        Self { code: 2, message }
    }
}

impl From<ancde::Error> for CliError {
    fn from(e: ancde::Error) -> Self {
        let code = match e {
            ancde::Error::Numerical(_) | ancde::Error::Instability(_) => 3,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::config(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "ancde", version, about = "Attentive neural CDEs for irregular time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON run config; writes checkpoint, log, summary and splits.
    Train { config: PathBuf },
    /// Score a checkpoint on an observations CSV.
    Eval {
        checkpoint: PathBuf,
        data: PathBuf,
        #[arg(long, value_parser = parse_metric)]
        metric: Metric,
        /// Label/target file; defaults to `<data stem>_labels.csv` next to the data.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Export attention on a uniform grid, one CSV per sample.
    AttnExport {
        checkpoint: PathBuf,
        data: PathBuf,
        #[arg(long)]
        grid: usize,
        /// Output directory; defaults to `attention/` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks on the configured model.
    Gradcheck { config: PathBuf },
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    s.parse().map_err(|e: ancde::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config } => commands::train(config),
        Command::Eval {
            checkpoint,
            data,
            metric,
            labels,
            report,
        } => commands::eval(checkpoint, data, labels.as_deref(), *metric, report.as_deref()),
        Command::AttnExport {
            checkpoint,
            data,
            grid,
            out,
        } => commands::attn_export(checkpoint, data, *grid, out.as_deref()),
        Command::Gradcheck { config } => match commands::gradcheck(config) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
