//! Command-line driver: every subcommand reads one TOML run configuration,
//! writes its artifacts and prints a one-line JSON summary.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::Path;

use causalnet::granger::GrangerError;
use causalnet::ingest::IngestError;
use causalnet::model::ModelError;
use causalnet::synth::SynthError;
use causalnet::trainer::TrainError;
use thiserror::Error;

pub use commands::{run, Cli, Command};
pub use config::RunConfig;


/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors go to `err` as one JSON line.
pub fn execute<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    use clap::Parser;
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match run(&cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let line = serde_json::json!({ "error": e.category(), "message": e.to_string() });
            let _ = writeln!(err, "{line}");
            e.exit_code()
        }
    }
}

/// Errors grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 3,
            CliError::MissingFile(_) => 4,
            CliError::Malformed(_) => 5,
            CliError::Numerical(_) => 6,
            CliError::Io(_) => 7,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::MissingFile(_) => "missing_file",
            CliError::Malformed(_) => "malformed_input",
            CliError::Numerical(_) => "numerical",
            CliError::Io(_) => "io",
        }
    }

    pub fn from_io(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingFile(path.display().to_string())
        } else {
            CliError::Io(format!("{}: {e}", path.display()))
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Io(io) => CliError::Io(io.to_string()),
            IngestError::BadQuantile(_) | IngestError::BadFractions(_) => CliError::Config(e.to_string()),
            other => CliError::Malformed(other.to_string()),
        }
    }
}

impl From<GrangerError> for CliError {
    fn from(e: GrangerError) -> Self {
        match e {
            GrangerError::Config(_) => CliError::Config(e.to_string()),
            other => CliError::Malformed(other.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Config(e.to_string()),
            ModelError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Malformed(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteGradient(_) | TrainError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
            TrainError::Config(_) | TrainError::ShapeMismatch(_) | TrainError::NoSamples(_) => CliError::Config(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Ingest(i) => i.into(),
            TrainError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Malformed(other.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Malformed(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Malformed(e.to_string())
    }
}
