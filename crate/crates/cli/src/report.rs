//! JSON report and its writers.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

/// Output of one run. Floats are written in shortest round-trip form, so
/// parsing a report gives back the identical value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Effective configuration with every default filled in.
    pub config: Value,
    #[serde(default)]
    pub parameters: Vec<String>,
    #[serde(default)]
    pub theta: Vec<f64>,
    pub se: Option<Vec<f64>>,
    /// Normal-theory intervals at the configured level.
    pub ci: Option<Vec<[f64; 2]>>,
    /// Largest calibration residual divided by `N`.
    pub residual: Option<f64>,
    pub iterations: Option<usize>,
    /// Command-specific results.
    pub details: Value,
    /// Solver notes in the order they were produced.
    #[serde(default)]
    pub log: Vec<String>,
}

impl Report {
    pub fn new(command: &str, config: &impl Serialize) -> Result<Self, CliError> {
        Ok(Report {
            tool: env!("CARGO_PKG_NAME").trim_end_matches("-cli").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: to_value(config)?,
            parameters: Vec::new(),
            theta: Vec::new(),
            se: None,
            ci: None,
            residual: None,
            iterations: None,
            details: Value::Null,
            log: Vec::new(),
        })
    }

    pub fn to_json(&self) -> Result<String, CliError> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| CliError::io(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::io(format!("malformed report: {e}")))
    }
}

/// Serialize to a JSON value; non-finite floats become `null`.
pub fn to_value(v: &impl Serialize) -> Result<Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::io(e.to_string()))
}

/// `Some(v)` for finite values only.
pub fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Write the report to `out`, or to standard output when `out` is `None`.
pub fn write_report(report: &Report, out: Option<&Path>) -> Result<(), CliError> {
    let text = report.to_json()?;
    match out {
        Some(path) => write_file(path, &text),
        None => {
            use std::io::Write;
            std::io::stdout()
                .write_all(text.as_bytes())
                .map_err(|e| CliError::io(format!("cannot write report: {e}")))
        }
    }
}

pub fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}
