//! Effective settings: command-line flags over the config file over the
//! built-in defaults.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

/// Read the config file and keep the keys that apply to `command`: the
/// top-level scalars, overridden by the `[command]` table.
pub fn file_layer(path: Option<&Path>, command: &str) -> Result<Map<String, Value>, CliError> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table = toml::from_str(&text)
        .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))?;
    let mut out = Map::new();
    for (k, v) in &table {
        if !v.is_table() {
            out.insert(k.clone(), to_json(v)?);
        }
    }
    if let Some(section) = table.get(command) {
        let Some(section) = section.as_table() else {
            return Err(CliError::usage(format!("config key `{command}` must be a table")));
        };
        for (k, v) in section {
            out.insert(k.clone(), to_json(v)?);
        }
    }
    Ok(out)
}

fn to_json(v: &toml::Value) -> Result<Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::usage(format!("config value: {e}")))
}

/// Overlay the set flags on the file layer and deserialize, filling the rest
/// from `T::default()`. Keys that `T` does not know are rejected.
pub fn resolve<T, A>(file: Map<String, Value>, flags: &A) -> Result<T, CliError>
where
    T: DeserializeOwned + Serialize + Default,
    A: Serialize,
{
    let known = serde_json::to_value(T::default()).map_err(|e| CliError::usage(e.to_string()))?;
    let mut merged = file;
    if let Value::Object(cli) = serde_json::to_value(flags).map_err(|e| CliError::usage(e.to_string()))? {
        merged.extend(cli);
    }
    if let Some(key) = merged.keys().find(|k| known.get(k.as_str()).is_none()) {
        return Err(CliError::usage(format!("unknown config key `{key}`")));
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::usage(format!("configuration: {e}")))
}

pub fn require<T: Clone>(v: &Option<T>, name: &str) -> Result<T, CliError> {
    v.clone()
        .ok_or_else(|| CliError::usage(format!("missing required option --{}", name.replace('_', "-"))))
}

pub fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(str::to_string).collect()
}

pub fn check_level(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(CliError::usage(format!("--{} must lie in (0, 1), got {v}", name.replace('_', "-"))))
    }
}

/// Input table and column roles shared by the data-driven commands.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub data: Option<PathBuf>,
    pub outcome: Option<String>,
    pub covariates: Option<String>,
    pub response: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateConfig {
    #[serde(flatten)]
    pub data: DataConfig,
    pub balance: Option<String>,
    pub method: String,
    pub estimand: String,
    /// `linearized` for the smoothed method and `bootstrap` otherwise when unset.
    pub variance: Option<String>,
    pub bootstrap_reps: usize,
    pub seed: u64,
    pub ci_level: f64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            data: DataConfig::default(),
            balance: None,
            method: "ip".into(),
            estimand: "mean".into(),
            variance: None,
            bootstrap_reps: 500,
            seed: 0,
            ci_level: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateMvConfig {
    #[serde(flatten)]
    pub data: DataConfig,
    pub include_x: bool,
    pub ci_level: f64,
}

impl Default for EstimateMvConfig {
    fn default() -> Self {
        EstimateMvConfig {
            data: DataConfig::default(),
            include_x: true,
            ci_level: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    pub study: String,
    pub rm: String,
    pub or: String,
    pub scenario: String,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    /// Unset: the study's standard method list.
    pub methods: Option<String>,
    pub balance: Option<String>,
    pub variance: bool,
    pub ci_level: f64,
    pub metrics: Option<PathBuf>,
    pub replicates: Option<PathBuf>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            study: "two".into(),
            rm: "rm1".into(),
            or: "or1".into(),
            scenario: "1".into(),
            n: 1000,
            reps: 1000,
            seed: 0,
            methods: None,
            balance: None,
            variance: true,
            ci_level: 0.95,
            metrics: None,
            replicates: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VarselConfig {
    #[serde(flatten)]
    pub data: DataConfig,
    pub scad_a: f64,
    pub grid_size: usize,
    pub grid_ratio: f64,
    pub ci_level: f64,
}

impl Default for VarselConfig {
    fn default() -> Self {
        let s = smoothps::dimension_reduction::ScadOptions::default();
        VarselConfig {
            data: DataConfig::default(),
            scad_a: s.a,
            grid_size: s.grid_size,
            grid_ratio: s.grid_ratio,
            ci_level: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdrConfig {
    #[serde(flatten)]
    pub data: DataConfig,
    pub dim: usize,
    pub seed: u64,
    pub restarts: usize,
    pub eps: f64,
    pub ci_level: f64,
}

impl Default for SdrConfig {
    fn default() -> Self {
        let s = smoothps::dimension_reduction::SdrOptions::default();
        SdrConfig {
            data: DataConfig::default(),
            dim: 1,
            seed: s.seed,
            restarts: s.restarts,
            eps: s.eps,
            ci_level: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EltestConfig {
    #[serde(flatten)]
    pub data: DataConfig,
    pub balance: Option<String>,
    pub theta0: Option<f64>,
    pub masses: String,
    pub alpha: f64,
}

impl Default for EltestConfig {
    fn default() -> Self {
        EltestConfig {
            data: DataConfig::default(),
            balance: None,
            theta0: None,
            masses: "full_sample".into(),
            alpha: 0.05,
        }
    }
}
