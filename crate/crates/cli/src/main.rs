//! `tracecast`: synthesize traces, inject anomalies, train forecasters,
//! detect anomalies and run the experiment sweeps.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tracecast::ErrorClass;

#[derive(Parser, Debug)]
#[command(name = "tracecast", version, about = "Forecasting-based anomaly prediction for sensor traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: GlobalArgs,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; falls back to TRACECAST_OUT, then the config's out_dir, then `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Sweep all six lookback/horizon pairs instead of the desk subset.
    #[arg(long, global = true)]
    full_grid: bool,
    /// Parallel sweep workers.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Suppress progress and result output.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate the configured recipe as a raw trace.
    Synth,
    /// Normalize the raw trace and inject the configured anomalies.
    Inject,
    /// Train the configured model for every configured window.
    Train,
    /// Write test-run and reference forecasts of the trained models.
    Forecast,
    /// Score the test run and write detection reports.
    Detect,
    /// Collect detection metrics over the configured windows.
    Eval,
    /// Sweep both models over the window grid.
    Bench,
    /// Sweep the graph model over the top-K grid.
    Ablate,
    /// Parameter counts of both models per window.
    Complexity,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match commands::run(cli.command, &cli.global) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            })
        }
    }
}
