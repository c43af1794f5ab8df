//! Command-line entry point shared by the `drdos` binary.

mod batch;
mod run;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;
use tracing_subscriber::EnvFilter;

use crate::aggregation::MonitoredPortTable;
use crate::asn_map::PrefixTable;

#[derive(Debug, Parser)]
#[command(name = "drdos", version, about = "DRDoS detection over flow telemetry")]
pub struct Cli {
    /// Human-readable warnings only instead of JSON logs.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect attacks in a replay file, a capture, or a live NetFlow socket.
    Run(run::RunArgs),
    /// Generate synthetic flows from a scenario file.
    Simulate(batch::SimulateArgs),
    /// Look for blackholing and rerouting around attack sessions.
    AnalyzeMitigation(batch::MitigationArgs),
    /// Derive filtering rules from an alert log.
    GenRules(batch::GenRulesArgs),
    /// Offline reports over session logs and sketch archives.
    #[command(subcommand)]
    Report(ReportCommand),
}

#[derive(Debug, Subcommand)]
pub enum ReportCommand {
    /// Duration/volume distributions, per-port counts, source statistics.
    Stats(batch::StatsArgs),
    /// Daily per-source traffic matrix for one (victim AS, port) key.
    Matrix(batch::MatrixArgs),
}

#[derive(Debug, Args, Clone)]
pub struct PortsArg {
    /// Monitored port table; defaults to the built-in reflection ports.
    #[arg(long)]
    pub ports: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 2,
        }
    }

    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub(crate) fn config(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Config(format!("{}: {e}", path.display()))
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Inputs named on the command line must exist before any work starts.
pub(crate) fn require_exists(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::config(path, "no such file"))
    }
}

pub(crate) fn open_input(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::config(path, e))
}

pub(crate) fn create_output(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

pub(crate) fn load_prefix_table(path: &Path) -> CliResult<PrefixTable> {
    let table = PrefixTable::load(open_input(path)?).map_err(|e| CliError::config(path, e))?;
    let report = table.report();
    if report.malformed > 0 || report.duplicates > 0 {
        tracing::warn!(
            path = %path.display(),
            malformed = report.malformed,
            duplicates = report.duplicates,
            "prefix table lines skipped or replaced"
        );
    }
    tracing::info!(path = %path.display(), entries = report.entries, "prefix table loaded");
    Ok(table)
}

pub(crate) fn load_ports(arg: &PortsArg) -> CliResult<MonitoredPortTable> {
    match &arg.ports {
        None => Ok(MonitoredPortTable::default()),
        Some(p) => MonitoredPortTable::load(open_input(p)?).map_err(|e| CliError::config(p, e)),
    }
}

fn init_logging(quiet: bool) {
    let filter = |default: &str| EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default));
    let builder = tracing_subscriber::fmt().with_writer(std::io::stderr);
    // a second initialization (tests calling `main_with` twice) is harmless
    let _ = if quiet {
        builder.with_env_filter(filter("warn")).compact().try_init()
    } else {
        builder.with_env_filter(filter("info")).json().try_init()
    };
}

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run(a) => run::run(a),
        Command::Simulate(a) => batch::simulate(a),
        Command::AnalyzeMitigation(a) => batch::analyze_mitigation(a),
        Command::GenRules(a) => batch::gen_rules(a),
        Command::Report(ReportCommand::Stats(a)) => batch::report_stats(a),
        Command::Report(ReportCommand::Matrix(a)) => batch::report_matrix(a),
    }
}

/// Parses `args` and runs the command: 0 success, 1 configuration error,
/// 2 runtime I/O error.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let quiet = cli.quiet;
    init_logging(quiet);
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if quiet {
                eprintln!("drdos: {e}");
            } else {
                tracing::error!(error = %e, "aborted");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
