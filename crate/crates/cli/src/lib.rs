//! Command-line front end: argument parsing, config merging, dispatch and
//! report output.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;

use args::{Cli, Command};
use config::{file_layer, resolve};
use error::CliError;
use report::{write_report, Report};

/// Parse `argv`, run the command and write its report. Returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let mut file = file_layer(cli.config.as_deref(), cli.command.name())?;
    let file_threads = file.remove("threads");
    let file_out = file.remove("out");
    let threads = match (cli.threads, file_threads) {
        (Some(t), _) => t,
        (None, Some(v)) => serde_json::from_value(v).map_err(|e| CliError::usage(format!("config `threads`: {e}")))?,
        (None, None) => 0,
    };
    let out: Option<PathBuf> = match (&cli.out, file_out) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(v)) => Some(serde_json::from_value(v).map_err(|e| CliError::usage(format!("config `out`: {e}")))?),
        (None, None) => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    let report = pool.install(|| dispatch(&cli.command, file))?;
    write_report(&report, out.as_deref())
}

fn dispatch(command: &Command, file: serde_json::Map<String, serde_json::Value>) -> Result<Report, CliError> {
    match command {
        Command::Estimate(a) => commands::estimate_cmd(resolve(file, a)?),
        Command::EstimateMv(a) => commands::estimate_mv_cmd(resolve(file, a)?),
        Command::Simulate(a) => commands::simulate_cmd(resolve(file, a)?),
        Command::Varsel(a) => commands::varsel_cmd(resolve(file, a)?),
        Command::Sdr(a) => commands::sdr_cmd(resolve(file, a)?),
        Command::Eltest(a) => commands::eltest_cmd(resolve(file, a)?),
    }
}
