//! Command-line front end: configuration, CSV ingestion and the verbs
//! `fit`, `loglik`, `simulate` and `validate`.

pub mod commands;
pub mod config;
pub mod error;
pub mod ingest;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;

pub use commands::{execute, Outcome, Verb};
pub use config::RunConfig;
pub use error::{CliError, ErrorKind};

#[derive(Debug, Parser)]
#[command(name = "cglmm", version, about = "Closed-form maximum likelihood for conjugate GLMMs")]
pub struct Cli {
    #[arg(value_enum)]
    pub verb: Verb,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input CSV (overrides `data.input`).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output path (overrides `run.output`).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Seed for every random component without its own seed (overrides `run.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parameter values: a fit document, a JSON object or `name = value` lines.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Any configuration key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Cli {
    /// Effective configuration: file, then `--set`, then dedicated flags.
    pub fn config(&self) -> Result<RunConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for pair in &self.set {
            config.set_pair(pair)?;
        }
        let path_flags = [("data.input", &self.input), ("run.output", &self.output), ("run.params", &self.params)];
        for (key, value) in path_flags {
            if let Some(p) = value {
                config.set(key, &p.to_string_lossy())?;
            }
        }
        if let Some(seed) = self.seed {
            config.set("run.seed", &seed.to_string())?;
        }
        Ok(config)
    }
}

/// Parses arguments, runs the verb, prints results and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = cli.config().and_then(|config| execute(cli.verb, &config));
    match result {
        Ok(outcome) => {
            print!("{}", outcome.stdout);
            match outcome.failure {
                Some(err) => report_error(&err),
                None => 0,
            }
        }
        Err(err) => report_error(&err),
    }
}

fn report_error(err: &CliError) -> i32 {
    eprintln!("{}", serde_json::to_string_pretty(&err.to_json()).expect("JSON values always serialize"));
    err.exit_code()
}
