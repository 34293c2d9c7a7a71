use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use exclusion_cli::{CliError, LoadedConfig, Status};

#[derive(Parser)]
#[command(
    name = "exclusion",
    version,
    about = "Experiments on inhomogeneous exclusion processes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Io {
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Directory for the CSV tables.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Exact and/or Monte Carlo flux over chain sizes and seeds.
    ScanFlux(Io),
    /// Check that raising any single rate never lowers the exact flux.
    AuditMonotone(Io),
    /// Check the coupling invariants at every event of coupled runs.
    AuditCoupling(Io),
    /// Classify the reversible-measure regime of environments.
    ClassifyEnv(Io),
    /// Solve for single-particle invariant measures and flux criteria.
    SigmaSolve(Io),
}

type Verb = fn(&LoadedConfig, &std::path::Path) -> Result<Status, CliError>;

fn run(cli: Cli) -> Result<Status, CliError> {
    let (io, verb): (&Io, Verb) = match &cli.command {
        Command::ScanFlux(io) => (io, exclusion_cli::scan_flux),
        Command::AuditMonotone(io) => (io, exclusion_cli::audit_monotone),
        Command::AuditCoupling(io) => (io, exclusion_cli::audit_coupling),
        Command::ClassifyEnv(io) => (io, exclusion_cli::classify_env),
        Command::SigmaSolve(io) => (io, exclusion_cli::sigma_solve),
    };
    let loaded = exclusion_cli::load(&io.config)?;
    verb(&loaded, &io.out)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(status) => {
            match &status {
                Status::Ok { summary } => println!("{summary}"),
                Status::Violation { summary } => eprintln!("violation: {summary}"),
            }
            ExitCode::from(status.exit_code())
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
