//! Command-line grammar. Every option is optional here so that a config
//! file can supply it; required values are checked after merging.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "smoothps", version, about = "Smoothed propensity-score estimation for missing data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// TOML config file; its values sit between the flags and the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Write the JSON report here instead of standard output.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Worker threads, 0 for one per core.
    #[arg(long, global = true, env = "SMOOTHPS_THREADS")]
    pub threads: Option<usize>,

    /// Log more to standard error (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate a mean or regression from a single outcome with missing values.
    Estimate(EstimateArgs),
    /// Estimate means of several outcomes with arbitrary missingness patterns.
    EstimateMv(EstimateMvArgs),
    /// Run a Monte Carlo study.
    Simulate(SimulateArgs),
    /// SCAD covariate selection followed by the smoothed estimator.
    Varsel(VarselArgs),
    /// Kernel dimension reduction followed by the smoothed estimator.
    Sdr(SdrArgs),
    /// Empirical likelihood ratio test for the outcome mean.
    Eltest(EltestArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Estimate(_) => "estimate",
            Command::EstimateMv(_) => "estimate-mv",
            Command::Simulate(_) => "simulate",
            Command::Varsel(_) => "varsel",
            Command::Sdr(_) => "sdr",
            Command::Eltest(_) => "eltest",
        }
    }
}

#[derive(Debug, Default, Args, Serialize)]
pub struct DataArgs {
    /// Input CSV with a header row; empty cells and NA are missing.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,

    /// Outcome column (comma-separated for several).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome: Option<String>,

    /// Covariate columns; defaults to every other column.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covariates: Option<String>,

    /// 0/1 response indicator column.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct EstimateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,

    /// Balancing terms such as `x1,x2^2,x1*x3`; defaults to the covariates.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub balance: Option<String>,

    #[arg(long, value_parser = ["ip", "mle", "cbps", "ebps"])]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,

    /// `mean` of the outcome or `least_squares` coefficients on the covariates.
    #[arg(long, value_parser = ["mean", "least_squares"])]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimand: Option<String>,

    #[arg(long, value_parser = ["none", "linearized", "bootstrap", "both"])]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance: Option<String>,

    /// Bootstrap replicates.
    #[arg(long, visible_alias = "reps")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap_reps: Option<usize>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_level: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct EstimateMvArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,

    /// Use the covariates in every pattern's balancing functions.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub include_x: Option<bool>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_level: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, value_parser = ["one", "two"])]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub study: Option<String>,

    /// Response model of study one.
    #[arg(long, value_parser = ["rm1", "rm2"])]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rm: Option<String>,

    /// Outcome model of study one.
    #[arg(long = "or", value_parser = ["or1", "or2"])]
    #[serde(rename = "or", skip_serializing_if = "Option::is_none")]
    pub outcome_model: Option<String>,

    /// Scenario of study two.
    #[arg(long, value_parser = ["1", "2"])]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,

    /// Sample size per replicate.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,

    /// Comma-separated methods; each balances `--balance` or every covariate.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub methods: Option<String>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub balance: Option<String>,

    /// Compute linearized variances for coverage.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance: Option<bool>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_level: Option<f64>,

    /// Metrics table as CSV.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<PathBuf>,

    /// Per-replicate records as CSV.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicates: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct VarselArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,

    /// SCAD knot constant.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scad_a: Option<f64>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_size: Option<usize>,

    /// Smallest penalty as a fraction of the largest.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_ratio: Option<f64>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_level: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct SdrArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,

    /// Target dimension.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub restarts: Option<usize>,

    /// Kernel ridge parameter.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_level: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct EltestArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub balance: Option<String>,

    /// Hypothesized mean.
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta0: Option<f64>,

    /// Units carrying likelihood mass.
    #[arg(long, value_parser = ["full_sample", "respondents"])]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masses: Option<String>,

    /// Test size used for the reject flag.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}
