//! SCAD-penalized least squares on the respondents, used to pick the
//! balancing covariates before calibration.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::calibration::calibrate;
use crate::data::{BalancingDesign, Mean, Sample};
use crate::error::{Error, Result};
use crate::estimators::{sps_from_weights, EstimateResult, EstimatorOptions};
use crate::inference::linearized_variance;
use crate::linalg;

/// Derivative of the SCAD penalty at `|alpha|`.
pub fn scad_penalty_deriv(alpha_abs: f64, lambda: f64, a: f64) -> f64 {
    if alpha_abs < lambda {
        lambda
    } else {
        (a * lambda - alpha_abs).max(0.0) / (a - 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScadOptions {
    /// SCAD knot constant.
    pub a: f64,
    /// Explicit penalty grid; when empty a geometric grid is built.
    pub lambda_grid: Vec<f64>,
    pub grid_size: usize,
    /// Smallest grid value as a fraction of the largest.
    pub grid_ratio: f64,
    /// Coefficients below this magnitude are set to exactly zero.
    pub zero_threshold: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ScadOptions {
    fn default() -> Self {
        ScadOptions {
            a: 3.7,
            lambda_grid: Vec::new(),
            grid_size: 40,
            grid_ratio: 1e-3,
            zero_threshold: 1e-6,
            max_iter: 1000,
            tol: 1e-12,
        }
    }
}

/// One point of the tuning path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub lambda: f64,
    pub bic: f64,
    pub support: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Selected covariate indices (0-based, increasing).
    pub support: Vec<usize>,
    /// Intercept and slopes on the original covariate scale.
    pub intercept: f64,
    pub alpha: Vec<f64>,
    /// Slopes for standardized covariates and centered outcome.
    pub alpha_std: Vec<f64>,
    pub lambda: f64,
    pub path: Vec<PathPoint>,
}

struct Standardized {
    x: DMatrix<f64>,
    y: DVector<f64>,
    mean: Vec<f64>,
    sd: Vec<f64>,
    ymean: f64,
}

fn standardize(sample: &Sample) -> Result<Standardized> {
    let resp = sample.respondents();
    let n1 = resp.len();
    let d = sample.d();
    if n1 < d + 2 {
        return Err(Error::RankDeficient { rank: n1, required: d + 2 });
    }
    let mut x = DMatrix::from_fn(n1, d, |r, j| sample.x_row(resp[r])[j]);
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for j in 0..d {
        let mut col = x.column_mut(j);
        let m = col.mean();
        col.add_scalar_mut(-m);
        let s = (col.norm_squared() / n1 as f64).sqrt();
        if !(s > 0.0) {
            return Err(Error::RankDeficient { rank: d - 1, required: d });
        }
        col /= s;
        mean[j] = m;
        sd[j] = s;
    }
    let mut y = DVector::from_iterator(n1, resp.iter().map(|&i| sample.y(i).unwrap()));
    let ymean = y.mean();
    y.add_scalar_mut(-ymean);
    Ok(Standardized { x, y, mean, sd, ymean })
}

/// Minimizer over `t` of `t^2 - 2 z t + p(|t|)` with `p` the SCAD penalty.
/// The problem is convex because the penalty's curvature never exceeds
/// `1 / (a - 1) < 2`.
fn scad_threshold(z: f64, lambda: f64, a: f64) -> f64 {
    let m = z.abs();
    let t = if m <= 1.5 * lambda {
        (m - 0.5 * lambda).max(0.0)
    } else if m <= a * lambda {
        (2.0 * m - a * lambda / (a - 1.0)) / (2.0 - 1.0 / (a - 1.0))
    } else {
        m
    };
    t.copysign(z)
}

/// Coordinate descent for `N1^{-1} |y - X alpha|^2 + sum_j p(|alpha_j|)` on
/// unit-variance columns, started from `start`.
fn coordinate_descent(st: &Standardized, lambda: f64, start: &DVector<f64>, opts: &ScadOptions) -> Result<DVector<f64>> {
    let n1 = st.x.nrows() as f64;
    let d = st.x.ncols();
    if lambda == 0.0 {
        let gram = st.x.transpose() * &st.x;
        let xty = st.x.transpose() * &st.y;
        return linalg::solve_spd(&gram, &xty).ok_or(Error::RankDeficient { rank: d - 1, required: d });
    }
    let mut alpha = start.clone();
    let mut resid = &st.y - &st.x * &alpha;
    for _ in 0..opts.max_iter {
        let mut change: f64 = 0.0;
        for j in 0..d {
            let col = st.x.column(j);
            let z = col.dot(&resid) / n1 + alpha[j];
            let next = scad_threshold(z, lambda, opts.a);
            let step = next - alpha[j];
            if step != 0.0 {
                resid.axpy(-step, &col, 1.0);
                alpha[j] = next;
                change = change.max(step.abs());
            }
        }
        if change <= opts.tol {
            for j in 0..d {
                if alpha[j].abs() < opts.zero_threshold {
                    alpha[j] = 0.0;
                }
            }
            return Ok(alpha);
        }
    }
    Err(Error::NoConvergence(format!("penalized fit at lambda = {lambda:e}")))
}

/// Largest useful penalty: above it the fit is identically zero.
fn lambda_max(st: &Standardized) -> f64 {
    let n1 = st.x.nrows() as f64;
    (st.x.transpose() * &st.y * (2.0 / n1)).amax()
}

fn geometric_grid(hi: f64, ratio: f64, size: usize) -> Vec<f64> {
    if size == 1 {
        return vec![hi];
    }
    (0..size)
        .map(|i| hi * ratio.powf(i as f64 / (size - 1) as f64))
        .collect()
}

/// SCAD-penalized working regression of `y` on `x` over respondents with
/// the penalty chosen by BIC.
pub fn penalized_select(sample: &Sample, opts: &ScadOptions) -> Result<SelectionResult> {
    let st = standardize(sample)?;
    let n1 = st.x.nrows() as f64;
    let grid = if opts.lambda_grid.is_empty() {
        geometric_grid(lambda_max(&st), opts.grid_ratio, opts.grid_size)
    } else {
        opts.lambda_grid.clone()
    };
    if grid.iter().any(|&l| !(l >= 0.0)) {
        return Err(Error::InvalidArgument("penalty levels must be nonnegative".into()));
    }
    // each fit starts from the previous one along the grid
    let mut fits = Vec::with_capacity(grid.len());
    let mut warm = DVector::zeros(st.x.ncols());
    for &l in &grid {
        let fit = coordinate_descent(&st, l, &warm, opts);
        if let Ok(a) = &fit {
            warm = a.clone();
        }
        fits.push(fit);
    }
    let mut best: Option<(f64, usize)> = None;
    let mut path = Vec::with_capacity(grid.len());
    let mut alphas = Vec::with_capacity(grid.len());
    for (g, fit) in fits.into_iter().enumerate() {
        let alpha = fit?;
        let resid = &st.y - &st.x * &alpha;
        let rss = resid.norm_squared().max(f64::MIN_POSITIVE);
        let support: Vec<usize> = (0..alpha.len()).filter(|&j| alpha[j] != 0.0).collect();
        let bic = n1 * (rss / n1).ln() + support.len() as f64 * n1.ln();
        // ties go to the larger penalty, which comes first on a decreasing grid
        if best.is_none_or(|(b, _)| bic < b) {
            best = Some((bic, g));
        }
        path.push(PathPoint {
            lambda: grid[g],
            bic,
            support,
        });
        alphas.push(alpha);
    }
    let (_, g) = best.ok_or_else(|| Error::InvalidArgument("empty penalty grid".into()))?;
    let alpha_std = alphas[g].clone();
    let alpha: Vec<f64> = (0..alpha_std.len()).map(|j| alpha_std[j] / st.sd[j]).collect();
    let intercept = st.ymean - linalg::dot(&alpha, &st.mean);
    Ok(SelectionResult {
        support: path[g].support.clone(),
        intercept,
        alpha,
        alpha_std: alpha_std.iter().cloned().collect(),
        lambda: grid[g],
        path,
    })
}

/// Residual of the penalized stationarity system on the standardized scale,
/// one entry per selected coefficient.
pub fn stationarity_residual(sample: &Sample, sel: &SelectionResult, a: f64) -> Result<Vec<f64>> {
    let st = standardize(sample)?;
    let n1 = st.x.nrows() as f64;
    let alpha = DVector::from_column_slice(&sel.alpha_std);
    let u = st.x.transpose() * (&st.x * &alpha - &st.y) * (2.0 / n1);
    Ok(sel
        .support
        .iter()
        .map(|&j| u[j] + scad_penalty_deriv(alpha[j].abs(), sel.lambda, a) * alpha[j].signum())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoStageResult {
    pub selection: SelectionResult,
    pub estimate: EstimateResult,
}

/// Select covariates, calibrate on the selected ones, and estimate the mean
/// with its linearization variance; selection uncertainty is ignored.
pub fn two_stage_sps(sample: &Sample, scad: &ScadOptions, opts: &EstimatorOptions) -> Result<TwoStageResult> {
    let selection = penalized_select(sample, scad)?;
    let design = BalancingDesign::linear(&selection.support);
    let (params, w) = calibrate(sample, &design, &opts.calibration)?;
    let est = sps_from_weights(sample, &params, &w, &Mean::scalar(), opts)?;
    let v = linearized_variance(sample, &design, &params, &est.theta, &Mean::scalar())?;
    Ok(TwoStageResult {
        selection,
        estimate: est.with_cov(&v),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::sps_estimate;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn linear_sample(seed: u64, n: usize, beta: &[f64], sigma: f64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = beta.len();
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let x: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let p = 1.0 / (1.0 + (-(0.5 + 0.5 * x[0])).exp());
            let yi = linalg::dot(beta, &x) + sigma * rng.sample::<f64, _>(StandardNormal);
            y.push(if rng.random::<f64>() < p { Some(yi) } else { None });
            rows.push(x);
        }
        Sample::from_rows(&rows, y).unwrap()
    }

    #[test]
    fn derivative_examples() {
        assert_eq!(scad_penalty_deriv(0.5, 1.0, 3.7), 1.0);
        assert!((scad_penalty_deriv(2.0, 1.0, 3.7) - 1.7 / 2.7).abs() < 1e-15);
        assert_eq!(scad_penalty_deriv(5.0, 1.0, 3.7), 0.0);
    }

    #[test]
    fn zero_penalty_is_least_squares() {
        let s = linear_sample(1, 300, &[1.0, 0.0, -0.5], 1.0);
        let o = ScadOptions {
            lambda_grid: vec![0.0],
            ..Default::default()
        };
        let r = penalized_select(&s, &o).unwrap();
        assert_eq!(r.support, vec![0, 1, 2]);
    }

    #[test]
    fn pure_noise_with_large_penalty_selects_nothing() {
        let s = linear_sample(2, 300, &[0.0, 0.0, 0.0], 1.0);
        let o = ScadOptions {
            lambda_grid: vec![10.0],
            ..Default::default()
        };
        let r = penalized_select(&s, &o).unwrap();
        assert!(r.support.is_empty());
        assert!(r.alpha.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn strong_single_signal_is_recovered() {
        let mut hits = 0;
        for seed in 0..20 {
            let s = linear_sample(seed, 2000, &[1.0, 0.0, 0.0, 0.0, 0.0], 0.1);
            if penalized_select(&s, &Default::default()).unwrap().support == vec![0] {
                hits += 1;
            }
        }
        assert!(hits >= 18, "{hits}");
    }

    #[test]
    fn selected_fit_is_stationary() {
        let s = linear_sample(3, 1000, &[1.0, -0.6, 0.0, 0.0, 0.3], 1.0);
        let sel = penalized_select(&s, &Default::default()).unwrap();
        for r in stationarity_residual(&s, &sel, 3.7).unwrap() {
            assert!(r.abs() < 1e-6, "{r}");
        }
        for j in 0..5 {
            if !sel.support.contains(&j) {
                assert_eq!(sel.alpha[j], 0.0);
            }
        }
    }

    #[test]
    fn full_selection_matches_plain_estimate() {
        let s = linear_sample(4, 1000, &[1.0, -1.0], 0.5);
        let two = two_stage_sps(&s, &Default::default(), &Default::default()).unwrap();
        assert_eq!(two.selection.support, vec![0, 1]);
        let plain = sps_estimate(&s, &BalancingDesign::identity(2), &Mean::scalar(), &Default::default()).unwrap();
        assert_eq!(two.estimate.theta, plain.theta);
    }

    #[test]
    fn empty_selection_gives_respondent_mean() {
        let s = linear_sample(5, 500, &[0.0, 0.0], 1.0);
        let o = ScadOptions {
            lambda_grid: vec![50.0],
            ..Default::default()
        };
        let two = two_stage_sps(&s, &o, &Default::default()).unwrap();
        let m = s.respondents().iter().map(|&i| s.y(i).unwrap()).sum::<f64>() / s.n_respondents() as f64;
        assert!((two.estimate.theta[0] - m).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn derivative_is_continuous_at_knots(lambda in 0.01f64..10.0) {
            let a = 3.7;
            for knot in [lambda, a * lambda] {
                let lo = scad_penalty_deriv(knot * (1.0 - 1e-12), lambda, a);
                let hi = scad_penalty_deriv(knot * (1.0 + 1e-12), lambda, a);
                prop_assert!((lo - hi).abs() <= 1e-9 * lambda);
            }
        }
    }
}
