//! `compconv` command-line front end.
//!
//! Every command renders a serializable report as text, JSON or CSV. Errors map
//! onto a fixed set of exit codes, see [`exit`].

use std::ffi::OsString;
use std::fmt;
use std::io::Write;

use clap::{Args, Parser, Subcommand, ValueEnum};
use compconv::Error;

pub mod analyze;
pub mod plan;
pub mod train;
pub mod verify;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const VERIFY_FAILED: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const INFEASIBLE: u8 = 3;
    pub const IO: u8 = 4;
}

/// Version of the JSON documents emitted by every command.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, Args)]
pub struct Common {
    /// Output format.
    #[arg(long, value_enum, default_value_t = Format::Text, global = true)]
    pub format: Format,
    /// Seed for every random stream the command uses.
    #[arg(long, default_value_t = 0, global = true)]
    pub seed: u64,
}

#[derive(Debug, Parser)]
#[command(
    name = "compconv",
    version,
    about = "Plan, cost, verify and train compact convolutions"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Resolve the layout of one layer and compare its cost with the plain convolution.
    Plan(plan::PlanArgs),
    /// Per-layer parameter and MAC table for a whole network.
    Analyze(analyze::AnalyzeArgs),
    /// Run the built-in oracle suites.
    Verify(verify::VerifyArgs),
    /// Train a toy classifier.
    Train(train::TrainArgs),
}

/// An error with the exit code it should produce.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: exit::USAGE,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError {
            code: exit::IO,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) => exit::IO,
            Error::InvalidArgument(_) | Error::Format(_) => exit::USAGE,
            Error::Infeasible(_)
            | Error::Shape(_)
            | Error::Groups { .. }
            | Error::EmptyOutput { .. }
            | Error::ChannelRange { .. } => exit::INFEASIBLE,
            _ => exit::VERIFY_FAILED,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Rendered command output plus the exit code to finish with.
pub struct Outcome {
    pub body: String,
    pub code: u8,
}

impl Outcome {
    pub fn ok(body: String) -> Self {
        Outcome { body, code: exit::OK }
    }
}

pub(crate) fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

pub(crate) fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::io(format!("csv: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Execute a parsed command.
pub fn execute(cli: &Cli) -> CliResult<Outcome> {
    match &cli.command {
        Command::Plan(a) => plan::run(a, &cli.common),
        Command::Analyze(a) => analyze::run(a, &cli.common),
        Command::Verify(a) => verify::run(a, &cli.common),
        Command::Train(a) => train::run(a, &cli.common),
    }
}

/// Parse `args` (including the program name), run, write output and return the exit code.
/// Errors go to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            if code == exit::OK {
                let _ = write!(out, "{e}");
            } else {
                eprint!("{e}");
            }
            return code;
        }
    };
    match execute(&cli) {
        Ok(o) => {
            if let Err(e) = out.write_all(o.body.as_bytes()) {
                eprintln!("error: {e}");
                return exit::IO;
            }
            o.code
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
