//! Data-generating processes with known targets.
//!
//! Every generator draws from a caller-supplied generator in a fixed order
//! per unit, so a seed pins the sample exactly.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{MultiSample, Sample};
use crate::error::{Error, Result};
use crate::inference::replicate_rng;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// `E[1 / (1 + exp(-T))]` for `T ~ N(mu, sd^2)` by the trapezoid rule on
/// `mu +- 12 sd`, which is accurate to rounding for this smooth integrand.
pub fn logistic_normal_mean(mu: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return logistic(mu);
    }
    let m = 4000;
    let h = 24.0 / m as f64;
    let mut s = 0.0;
    for k in 0..=m {
        let z = -12.0 + k as f64 * h;
        let w = if k == 0 || k == m { 0.5 } else { 1.0 };
        s += w * logistic(mu + sd * z) * (-0.5 * z * z).exp();
    }
    s * h / (2.0 * std::f64::consts::PI).sqrt()
}

/// Response mechanism of the factorial study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseModel {
    /// Logistic response on four N(2, 1) covariates.
    Rm1,
    /// Bernoulli(0.6) response with `x4` shifted by response status.
    Rm2,
}

/// Outcome model of the factorial study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeModel {
    /// `1 + x1 + x2 + x3 + x4 + e`.
    Or1,
    /// `1 + 0.5 x1 x2 + 0.5 x3^2 x4^2 + e`.
    Or2,
}

macro_rules! lower_enum {
    ($t:ty, $($v:ident => $s:literal),+) => {
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($s => Ok(<$t>::$v),)+
                    other => Err(Error::InvalidArgument(format!("unknown model `{other}`"))),
                }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(<$t>::$v => $s,)+ })
            }
        }
    };
}

lower_enum!(ResponseModel, Rm1 => "rm1", Rm2 => "rm2");
lower_enum!(OutcomeModel, Or1 => "or1", Or2 => "or2");

fn rm1_index(x: &[f64]) -> f64 {
    1.0 - x[0] + 0.5 * x[1] + 0.5 * x[2] - 0.25 * x[3]
}

fn outcome(or: OutcomeModel, x: &[f64], e: f64) -> f64 {
    match or {
        OutcomeModel::Or1 => 1.0 + x[0] + x[1] + x[2] + x[3] + e,
        OutcomeModel::Or2 => 1.0 + 0.5 * x[0] * x[1] + 0.5 * x[2].powi(2) * x[3].powi(2) + e,
    }
}

/// Factorial study sample drawn from `rng`. Per unit the draws are
/// `x1..x4`, the response uniform, then the outcome error (RM2 draws the
/// response uniform first since `x4` depends on it).
pub fn study_one_with(rm: ResponseModel, or: OutcomeModel, n: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let mut x = Vec::with_capacity(n * 4);
    let mut y = Vec::with_capacity(n);
    let mut delta = Vec::with_capacity(n);
    for _ in 0..n {
        let (row, d) = match rm {
            ResponseModel::Rm1 => {
                let row: Vec<f64> = (0..4).map(|_| 2.0 + normal(rng)).collect();
                let d = rng.random::<f64>() < logistic(rm1_index(&row));
                (row, d)
            }
            ResponseModel::Rm2 => {
                let d = rng.random::<f64>() < 0.6;
                let mut row: Vec<f64> = (0..3).map(|_| 2.0 + normal(rng)).collect();
                row.push(if d { 3.0 } else { 1.0 } + normal(rng));
                (row, d)
            }
        };
        let v = outcome(or, &row, normal(rng));
        y.push(if d { Some(v) } else { None });
        delta.push(d);
        x.extend(row);
    }
    Sample::from_flat(n, 4, x, y, delta)
}

pub fn study_one(rm: ResponseModel, or: OutcomeModel, n: usize, seed: u64) -> Result<Sample> {
    study_one_with(rm, or, n, &mut replicate_rng(seed, 0))
}

/// Population mean of the outcome.
pub fn study_one_theta0(rm: ResponseModel, or: OutcomeModel) -> f64 {
    // E[x4] and E[x4^2] under the response mixture
    let (m4, s4) = match rm {
        ResponseModel::Rm1 => (2.0, 5.0),
        ResponseModel::Rm2 => (0.6 * 3.0 + 0.4 * 1.0, 0.6 * 10.0 + 0.4 * 2.0),
    };
    match or {
        OutcomeModel::Or1 => 1.0 + 6.0 + m4,
        OutcomeModel::Or2 => 1.0 + 0.5 * 4.0 + 0.5 * 5.0 * s4,
    }
}

/// Marginal response rate.
pub fn study_one_response_rate(rm: ResponseModel) -> f64 {
    match rm {
        // the index is normal with mean 0.5 and variance 1 + 0.25 + 0.25 + 0.0625
        ResponseModel::Rm1 => logistic_normal_mean(0.5, 1.5625f64.sqrt()),
        ResponseModel::Rm2 => 0.6,
    }
}

/// `P(delta = 1 | x)`.
pub fn study_one_true_pi(rm: ResponseModel, x: &[f64]) -> f64 {
    match rm {
        ResponseModel::Rm1 => logistic(rm1_index(x)),
        // Bayes rule on the two normal components of x4
        ResponseModel::Rm2 => 1.0 / (1.0 + (0.4 / 0.6) * (4.0 - 2.0 * x[3]).exp()),
    }
}

/// Density ratio `f(x | delta = 0) / f(x | delta = 1)`.
pub fn study_one_true_ratio(rm: ResponseModel, x: &[f64]) -> f64 {
    match rm {
        ResponseModel::Rm1 => {
            let p1 = study_one_response_rate(rm);
            (-rm1_index(x)).exp() * p1 / (1.0 - p1)
        }
        ResponseModel::Rm2 => (4.0 - 2.0 * x[3]).exp(),
    }
}

/// Scenario of the covariate-choice study: the response index gains a
/// `phi (x2 - 1)` term with `phi = 0` or `1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl Scenario {
    pub fn phi(self) -> f64 {
        match self {
            Scenario::One => 0.0,
            Scenario::Two => 1.0,
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Scenario::One),
            "2" => Ok(Scenario::Two),
            other => Err(Error::InvalidArgument(format!("unknown scenario `{other}`"))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::One => "1",
            Scenario::Two => "2",
        })
    }
}

pub const STUDY_TWO_THETA0: f64 = 0.5;

fn study_two_index(scenario: Scenario, x: &[f64]) -> f64 {
    -x[0] + scenario.phi() * (x[1] - 1.0) + x[2]
}

/// Covariate-choice study sample. `x` is normal with unit means and
/// variances and correlation 0.5 between `x2` and `x3`; per unit the draws
/// are three normals for `x`, the outcome error, then the response uniform,
/// so both scenarios share `x` and `y` for a given generator state.
pub fn study_two_with(scenario: Scenario, n: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let r = 0.75f64.sqrt();
    let mut x = Vec::with_capacity(n * 3);
    let mut y = Vec::with_capacity(n);
    let mut delta = Vec::with_capacity(n);
    for _ in 0..n {
        let z = [normal(rng), normal(rng), normal(rng)];
        let row = [1.0 + z[0], 1.0 + z[1], 1.0 + 0.5 * z[1] + r * z[2]];
        let v = 1.0 + 0.5 * row[0] - row[1] + normal(rng);
        let d = rng.random::<f64>() < logistic(study_two_index(scenario, &row));
        y.push(if d { Some(v) } else { None });
        delta.push(d);
        x.extend(row);
    }
    Sample::from_flat(n, 3, x, y, delta)
}

pub fn study_two(scenario: Scenario, n: usize, seed: u64) -> Result<Sample> {
    study_two_with(scenario, n, &mut replicate_rng(seed, 0))
}

pub fn study_two_true_pi(scenario: Scenario, x: &[f64]) -> f64 {
    logistic(study_two_index(scenario, x))
}

pub fn study_two_response_rate(scenario: Scenario) -> f64 {
    // index variance: 1 + phi^2 + 1 + 2 phi cov(x2, x3)
    let phi = scenario.phi();
    logistic_normal_mean(0.0, (2.0 + phi * phi + phi).sqrt())
}

pub fn study_two_true_ratio(scenario: Scenario, x: &[f64]) -> f64 {
    let p1 = study_two_response_rate(scenario);
    (-study_two_index(scenario, x)).exp() * p1 / (1.0 - p1)
}

/// Two outcomes: `Y1 ~ N(0, 1)` always observed and
/// `Y2 = 0.5 + 0.8 Y1 + 0.6 e` observed with probability
/// `logistic(0.3 + Y1)`. Target means are `(0, 0.5)`.
pub fn bivariate_mar_with(n: usize, rng: &mut ChaCha8Rng) -> Result<MultiSample> {
    let mut y = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let y1 = normal(rng);
        let y2 = 0.5 + 0.8 * y1 + 0.6 * normal(rng);
        let keep = rng.random::<f64>() < logistic(0.3 + y1);
        y.push(Some(y1));
        y.push(if keep { Some(y2) } else { None });
    }
    MultiSample::new(n, 2, y, 0, Vec::new())
}

pub const BIVARIATE_THETA0: [f64; 2] = [0.0, 0.5];

/// Three outcomes: `Y1 ~ N(0, 1)` always observed, `Y2 = Y1 + e2` and
/// `Y3 = 0.5 + Y1 + e3`, each missing independently given `Y1`. All four
/// patterns occur.
pub fn trivariate_mar_with(n: usize, rng: &mut ChaCha8Rng) -> Result<MultiSample> {
    let mut y = Vec::with_capacity(3 * n);
    for _ in 0..n {
        let y1 = normal(rng);
        let y2 = y1 + normal(rng);
        let y3 = 0.5 + y1 + normal(rng);
        let k2 = rng.random::<f64>() < logistic(0.8 + y1);
        let k3 = rng.random::<f64>() < logistic(1.0 - 0.7 * y1);
        y.push(Some(y1));
        y.push(if k2 { Some(y2) } else { None });
        y.push(if k3 { Some(y3) } else { None });
    }
    MultiSample::new(n, 3, y, 0, Vec::new())
}

/// `P(Y2 <= Y3)` for the trivariate process: `Y3 - Y2 ~ N(0.5, 2)`.
pub fn trivariate_theta0() -> f64 {
    Normal::new(0.0, 1.0).unwrap().cdf(0.5 / 2f64.sqrt())
}

/// Sparse linear working model with ten standard normal covariates.
pub const SPARSE_SUPPORT: [usize; 4] = [0, 2, 5, 7];
pub const SPARSE_COEF: [f64; 4] = [1.0, -0.8, 0.6, 0.5];

/// `y = 1 + sum_j beta_j x_j + e` on [`SPARSE_SUPPORT`] with response
/// `logistic(0.5 + 0.5 x1)`.
pub fn sparse_linear_with(n: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let d = 10;
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    let mut delta = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let mut v = 1.0 + normal(rng);
        for (j, b) in SPARSE_SUPPORT.iter().zip(SPARSE_COEF) {
            v += b * row[*j];
        }
        let keep = rng.random::<f64>() < logistic(0.5 + 0.5 * row[0]);
        y.push(if keep { Some(v) } else { None });
        delta.push(keep);
        x.extend(row);
    }
    Sample::from_flat(n, d, x, y, delta)
}

/// Generating direction of the single-index process in dimension `d`.
pub fn single_index_direction(d: usize) -> Vec<f64> {
    let mut w = vec![0.0; d];
    w[0] = 0.5f64.sqrt();
    w[1] = 0.5f64.sqrt();
    w
}

/// `y = t + sin t + 0.2 e` with `t = w0' x`, `x ~ N(0, I_d)` (`d >= 2`), and
/// response `logistic(0.5 + 0.5 x_d)` so the index is not what drives
/// missingness.
pub fn single_index_with(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    if d < 2 {
        return Err(Error::InvalidArgument("single-index process needs d >= 2".into()));
    }
    let w0 = single_index_direction(d);
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    let mut delta = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let t: f64 = row.iter().zip(&w0).map(|(a, b)| a * b).sum();
        let v = t + t.sin() + 0.2 * normal(rng);
        let keep = rng.random::<f64>() < logistic(0.5 + 0.5 * row[d - 1]);
        y.push(if keep { Some(v) } else { None });
        delta.push(keep);
        x.extend(row);
    }
    Sample::from_flat(n, d, x, y, delta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_seed_gives_identical_sample() {
        let a = study_one(ResponseModel::Rm1, OutcomeModel::Or1, 200, 9).unwrap();
        let b = study_one(ResponseModel::Rm1, OutcomeModel::Or1, 200, 9).unwrap();
        assert_eq!(a, b);
        let c = study_one(ResponseModel::Rm1, OutcomeModel::Or1, 200, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn scenarios_share_covariates_and_outcomes() {
        let a = study_two(Scenario::One, 300, 4).unwrap();
        let b = study_two(Scenario::Two, 300, 4).unwrap();
        for i in 0..300 {
            assert_eq!(a.x_row(i), b.x_row(i));
        }
        // outcomes agree wherever both are observed
        for i in 0..300 {
            if let (Some(u), Some(v)) = (a.y(i), b.y(i)) {
                assert_eq!(u, v);
            }
        }
        assert_ne!(
            (0..300).map(|i| a.delta(i)).collect::<Vec<_>>(),
            (0..300).map(|i| b.delta(i)).collect::<Vec<_>>()
        );
    }

    #[test]
    fn logistic_normal_mean_matches_simple_cases() {
        assert!((logistic_normal_mean(0.0, 1.7) - 0.5).abs() < 1e-14);
        assert!((logistic_normal_mean(0.3, 0.0) - logistic(0.3)).abs() < 1e-15);
        // symmetry: E[logistic(T)] + E[logistic(-T)] = 1
        let a = logistic_normal_mean(0.7, 1.3);
        let b = logistic_normal_mean(-0.7, 1.3);
        assert!((a + b - 1.0).abs() < 1e-13);
    }

    #[test]
    fn large_sample_means_match_targets() {
        let n = 400_000;
        let tol_rate = 4.0 * (0.25 / n as f64).sqrt();
        for rm in [ResponseModel::Rm1, ResponseModel::Rm2] {
            let s = study_one_with(rm, OutcomeModel::Or1, n, &mut replicate_rng(1, 0)).unwrap();
            let rate = s.n_respondents() as f64 / n as f64;
            assert!((rate - study_one_response_rate(rm)).abs() < tol_rate, "{rm}: {rate}");
            // the noise-free part of each outcome model, averaged over all units
            let or1: f64 = (0..n).map(|i| 1.0 + s.x_row(i).iter().sum::<f64>()).sum::<f64>() / n as f64;
            let or2: f64 = (0..n)
                .map(|i| outcome(OutcomeModel::Or2, s.x_row(i), 0.0))
                .sum::<f64>()
                / n as f64;
            assert!((or1 - study_one_theta0(rm, OutcomeModel::Or1)).abs() < 0.02, "{or1}");
            assert!((or2 - study_one_theta0(rm, OutcomeModel::Or2)).abs() < 0.15, "{or2}");
        }
        for sc in [Scenario::One, Scenario::Two] {
            let s = study_two_with(sc, n, &mut replicate_rng(2, 0)).unwrap();
            let rate = s.n_respondents() as f64 / n as f64;
            assert!((rate - study_two_response_rate(sc)).abs() < tol_rate, "{sc}: {rate}");
            let m: f64 = (0..n).map(|i| 1.0 + 0.5 * s.x_row(i)[0] - s.x_row(i)[1]).sum::<f64>() / n as f64;
            assert!((m - STUDY_TWO_THETA0).abs() < 0.01);
        }
    }

    #[test]
    fn true_ratio_is_consistent_with_pi() {
        // 1 / pi = 1 + (p0 / p1) r
        for rm in [ResponseModel::Rm1, ResponseModel::Rm2] {
            let p1 = study_one_response_rate(rm);
            for x in [[2.0, 2.0, 2.0, 2.0], [1.0, 3.0, 0.5, 2.5]] {
                let lhs = 1.0 / study_one_true_pi(rm, &x);
                let rhs = 1.0 + (1.0 - p1) / p1 * study_one_true_ratio(rm, &x);
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trivariate_has_all_patterns() {
        let ms = trivariate_mar_with(500, &mut replicate_rng(3, 0)).unwrap();
        let masks: std::collections::BTreeSet<u64> = (0..500).map(|i| ms.observed_mask(i)).collect();
        assert_eq!(masks.len(), 4);
    }
}
