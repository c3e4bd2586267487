use std::path::PathBuf;

use clap::{Parser, Subcommand};
use roa_core::cli;

/// Certified region-of-attraction estimation.
#[derive(Parser)]
#[command(name = "roa", version)]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured algorithm and write report.txt, certs.json and contours/.
    Run { config: PathBuf },
    /// Re-check every certificate in a certs.json without a solver.
    ValidateCerts { certs: PathBuf },
    /// Emit the oracle boundary of a benchmark's true region of attraction.
    TrueRoa {
        benchmark: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Area and extent differences between two reports.
    Compare { report_a: PathBuf, report_b: PathBuf },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = match Args::parse().cmd {
        Cmd::Run { config } => cli::cmd_run(&config),
        Cmd::ValidateCerts { certs } => cli::cmd_validate_certs(&certs),
        Cmd::TrueRoa { benchmark, out } => cli::cmd_true_roa(&benchmark, out.as_deref()),
        Cmd::Compare { report_a, report_b } => cli::cmd_compare(&report_a, &report_b),
    };
    std::process::exit(code);
}
