//! Monte Carlo driver: replicate, fit every configured method, aggregate.

use std::io::Write;

use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dgp::{self, OutcomeModel, ResponseModel, Scenario};
use crate::data::{BalancingDesign, Mean, Sample};
use crate::error::{Error, Result};
use crate::estimators::{estimate, normal_quantile, ratio_ps_estimate, true_pi_dr_estimate, EstimatorOptions, Method};
use crate::inference::{linearized_variance, replicate_rng};

/// Largest tolerated share of failed fits per method.
pub const MAX_FAILURE_RATE: f64 = 0.05;

/// Which data-generating process to replicate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "study", rename_all = "lowercase")]
pub enum Study {
    One { rm: ResponseModel, or: OutcomeModel },
    Two { scenario: Scenario },
}

impl Study {
    pub fn generate(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
        match *self {
            Study::One { rm, or } => dgp::study_one_with(rm, or, n, rng),
            Study::Two { scenario } => dgp::study_two_with(scenario, n, rng),
        }
    }

    pub fn theta0(&self) -> f64 {
        match *self {
            Study::One { rm, or } => dgp::study_one_theta0(rm, or),
            Study::Two { .. } => dgp::STUDY_TWO_THETA0,
        }
    }

    pub fn true_pi(&self, x: &[f64]) -> f64 {
        match *self {
            Study::One { rm, .. } => dgp::study_one_true_pi(rm, x),
            Study::Two { scenario } => dgp::study_two_true_pi(scenario, x),
        }
    }

    pub fn true_ratio(&self, x: &[f64]) -> f64 {
        match *self {
            Study::One { rm, .. } => dgp::study_one_true_ratio(rm, x),
            Study::Two { scenario } => dgp::study_two_true_ratio(scenario, x),
        }
    }

    /// Number of covariates.
    pub fn d(&self) -> usize {
        match self {
            Study::One { .. } => 4,
            Study::Two { .. } => 3,
        }
    }
}

/// A method and the balancing functions it uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub label: String,
    pub method: Method,
    pub design: BalancingDesign,
}

impl MethodSpec {
    pub fn new(label: impl Into<String>, method: Method, design: BalancingDesign) -> Self {
        MethodSpec {
            label: label.into(),
            method,
            design,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub study: Study,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub methods: Vec<MethodSpec>,
    /// Compute linearization variances (smoothed estimator only) for coverage.
    pub variance: bool,
    pub level: f64,
    pub estimator: EstimatorOptions,
}

impl SimConfig {
    pub fn new(study: Study, n: usize, reps: usize, seed: u64, methods: Vec<MethodSpec>) -> Self {
        SimConfig {
            study,
            n,
            reps,
            seed,
            methods,
            variance: true,
            level: 0.95,
            estimator: EstimatorOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps < 1 {
            return Err(Error::InvalidArgument("at least one replicate is required".into()));
        }
        if self.n < 10 {
            return Err(Error::InvalidArgument(format!("sample size {} is below 10", self.n)));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidArgument("no methods configured".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidArgument(format!("coverage level {} outside (0, 1)", self.level)));
        }
        for m in &self.methods {
            m.design.check_dimension(self.study.d())?;
        }
        Ok(())
    }
}

/// Outcome of one method on one replicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub rep: usize,
    pub method: String,
    pub estimate: Option<f64>,
    pub variance: Option<f64>,
    pub residual: Option<f64>,
    pub error: Option<String>,
}

/// Aggregates for one method. `se` uses divisor `reps`, so
/// `rmse^2 = bias^2 + se^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub estimand: String,
    pub theta0: f64,
    pub reps: usize,
    pub failed: usize,
    pub bias: f64,
    pub se: f64,
    pub rmse: f64,
    pub mean_variance: Option<f64>,
    pub coverage: Option<f64>,
    pub max_residual: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn row(&self, method: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r).map_err(csv_error)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// Per-replicate records as CSV, one row per replicate and method.
pub fn replicates_to_csv(records: &[ReplicateRecord]) -> Result<String> {
    let mut wr = csv::Writer::from_writer(Vec::new());
    for r in records {
        wr.serialize(r).map_err(csv_error)?;
    }
    let buf = wr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("{other:?}")),
    }
}

/// Bias, spread and coverage of `estimates` around `theta0`.
pub fn summarize(
    method: &str,
    estimates: &[f64],
    variances: Option<&[f64]>,
    theta0: f64,
    level: f64,
) -> MetricsRow {
    let b = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / b;
    let se = (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / b).sqrt();
    let rmse = (estimates.iter().map(|e| (e - theta0).powi(2)).sum::<f64>() / b).sqrt();
    let z = normal_quantile(0.5 + level / 2.0);
    let (mean_variance, coverage) = match variances {
        Some(v) if v.len() == estimates.len() => {
            let mv = v.iter().sum::<f64>() / b;
            let hits = estimates
                .iter()
                .zip(v)
                .filter(|(e, v)| (*e - theta0).abs() <= z * v.sqrt())
                .count();
            (Some(mv), Some(hits as f64 / b))
        }
        _ => (None, None),
    };
    MetricsRow {
        method: method.to_string(),
        estimand: "mean".into(),
        theta0,
        reps: estimates.len(),
        failed: 0,
        bias: mean - theta0,
        se,
        rmse,
        mean_variance,
        coverage,
        max_residual: None,
    }
}

/// Fit one method; returns the estimate, its variance when available, and
/// the balancing residual when the method has one.
pub fn fit_method(
    spec: &MethodSpec,
    study: &Study,
    sample: &Sample,
    opts: &EstimatorOptions,
    variance: bool,
) -> Result<(f64, Option<f64>, Option<f64>)> {
    let estfun = Mean::scalar();
    let res = match spec.method {
        Method::TruePiDr => {
            let pi: Vec<f64> = (0..sample.n()).map(|i| study.true_pi(sample.x_row(i))).collect();
            true_pi_dr_estimate(sample, &pi, &spec.design, &estfun, opts, false)?
        }
        Method::RatioPs => {
            let r: Vec<f64> = (0..sample.n()).map(|i| study.true_ratio(sample.x_row(i))).collect();
            ratio_ps_estimate(sample, &r, &estfun, opts)?
        }
        m => estimate(m, sample, &spec.design, &estfun, opts)?,
    };
    let theta = res.theta[0];
    let var = match (&res.tilting, spec.method) {
        (Some(params), Method::Ip) if variance => {
            Some(linearized_variance(sample, &spec.design, params, &res.theta, &estfun)?[(0, 0)])
        }
        _ => None,
    };
    let resid = res.diagnostics.balancing_residual;
    Ok((theta, var, resid.is_finite().then_some(resid)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOutput {
    pub config: SimConfig,
    pub table: MetricsTable,
    pub replicates: Vec<ReplicateRecord>,
}

/// Run every method on `config.reps` samples. Replicate `r` draws from
/// stream `r` of the seed, so results do not depend on thread count.
pub fn run_monte_carlo(config: &SimConfig) -> Result<SimOutput> {
    config.validate()?;
    let per_rep: Vec<Vec<ReplicateRecord>> = (0..config.reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(config.seed, r as u64);
            let sample = config.study.generate(config.n, &mut rng);
            config
                .methods
                .iter()
                .map(|spec| {
                    let fit = sample
                        .as_ref()
                        .map_err(|e| Error::InvalidArgument(e.to_string()))
                        .and_then(|s| fit_method(spec, &config.study, s, &config.estimator, config.variance));
                    match fit {
                        Ok((est, var, resid)) => ReplicateRecord {
                            rep: r,
                            method: spec.label.clone(),
                            estimate: Some(est),
                            variance: var,
                            residual: resid,
                            error: None,
                        },
                        Err(e) => {
                            log::debug!("replicate {r}, method {}: {e}", spec.label);
                            ReplicateRecord {
                                rep: r,
                                method: spec.label.clone(),
                                estimate: None,
                                variance: None,
                                residual: None,
                                error: Some(e.to_string()),
                            }
                        }
                    }
                })
                .collect()
        })
        .collect();
    let replicates: Vec<ReplicateRecord> = per_rep.into_iter().flatten().collect();

    let theta0 = config.study.theta0();
    let mut rows = Vec::with_capacity(config.methods.len());
    for spec in &config.methods {
        let recs: Vec<&ReplicateRecord> = replicates.iter().filter(|r| r.method == spec.label).collect();
        let ok: Vec<&ReplicateRecord> = recs.iter().cloned().filter(|r| r.estimate.is_some()).collect();
        let failed = recs.len() - ok.len();
        if failed as f64 > MAX_FAILURE_RATE * config.reps as f64 || ok.is_empty() {
            return Err(Error::TooManyFailures {
                failed,
                total: config.reps,
            });
        }
        if failed > 0 {
            log::warn!("method {}: {failed} of {} fits failed", spec.label, config.reps);
        }
        let est: Vec<f64> = ok.iter().map(|r| r.estimate.unwrap()).collect();
        let var: Option<Vec<f64>> = ok.iter().map(|r| r.variance).collect();
        let mut row = summarize(&spec.label, &est, var.as_deref(), theta0, config.level);
        row.failed = failed;
        row.max_residual = ok.iter().filter_map(|r| r.residual).reduce(f64::max);
        rows.push(row);
    }
    Ok(SimOutput {
        config: config.clone(),
        table: MetricsTable { rows },
        replicates,
    })
}

/// Method list of the covariate-choice study: the smoothed estimator with
/// designs `(x1, x2)`, `(x1, x3)` and `(x1, x2, x3)`.
pub fn study_two_methods() -> Vec<MethodSpec> {
    vec![
        MethodSpec::new("ip_x1x2", Method::Ip, BalancingDesign::linear(&[0, 1])),
        MethodSpec::new("ip_x1x3", Method::Ip, BalancingDesign::linear(&[0, 2])),
        MethodSpec::new("ip_x1x2x3", Method::Ip, BalancingDesign::linear(&[0, 1, 2])),
    ]
}

/// Method list of the factorial study: four weighting methods, each
/// balancing `(1, x1, .., x4)`.
pub fn study_one_methods() -> Vec<MethodSpec> {
    let d = BalancingDesign::identity(4);
    [Method::Ip, Method::Mle, Method::Cbps, Method::Ebps]
        .into_iter()
        .map(|m| MethodSpec::new(m.as_str(), m, d.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(reps: usize) -> SimConfig {
        SimConfig::new(Study::Two { scenario: Scenario::One }, 200, reps, 42, study_two_methods())
    }

    #[test]
    fn single_replicate_has_zero_se() {
        let out = run_monte_carlo(&small_config(1)).unwrap();
        for row in &out.table.rows {
            assert_eq!(row.se, 0.0);
            let est = out.replicates.iter().find(|r| r.method == row.method).unwrap().estimate.unwrap();
            assert_eq!(row.bias, est - 0.5);
        }
    }

    #[test]
    fn identical_config_gives_identical_table() {
        let a = run_monte_carlo(&small_config(12)).unwrap();
        let b = run_monte_carlo(&small_config(12)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rmse_identity_holds() {
        let out = run_monte_carlo(&small_config(30)).unwrap();
        for r in &out.table.rows {
            assert!((r.rmse.powi(2) - r.bias.powi(2) - r.se.powi(2)).abs() < 1e-12 * (1.0 + r.rmse.powi(2)));
            assert!(r.max_residual.unwrap() <= 1e-8);
            assert!(r.coverage.is_some());
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let cfg = small_config(10);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| run_monte_carlo(&cfg)).unwrap();
        let many = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(|| run_monte_carlo(&cfg)).unwrap();
        assert_eq!(one, many);
    }

    #[test]
    fn summarize_known_values() {
        let row = summarize("m", &[1.0, 3.0], Some(&[4.0, 0.01]), 1.5, 0.95);
        assert_eq!(row.bias, 0.5);
        assert_eq!(row.se, 1.0);
        assert!((row.rmse - 1.25f64.sqrt()).abs() < 1e-15);
        assert_eq!(row.mean_variance, Some(2.005));
        // |1 - 1.5| <= 1.96 * 2 but |3 - 1.5| > 1.96 * 0.1
        assert_eq!(row.coverage, Some(0.5));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small_config(0);
        assert!(run_monte_carlo(&c).is_err());
        c.reps = 2;
        c.n = 5;
        assert!(run_monte_carlo(&c).is_err());
        c.n = 100;
        c.methods = vec![MethodSpec::new("bad", Method::Ip, BalancingDesign::linear(&[7]))];
        assert!(run_monte_carlo(&c).is_err());
    }

    #[test]
    fn csv_has_header_and_one_line_per_method() {
        let out = run_monte_carlo(&small_config(3)).unwrap();
        let s = out.table.to_csv_string().unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("method,estimand,theta0,reps,failed,bias,se,rmse"));
    }
}
