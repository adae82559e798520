//! Weighted estimating-equation estimators: the smoothed propensity-score
//! method and its competitors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::calibration::{
    build_problem, calibrate, solve_tilt, standardize, CalibrationOptions, SmoothedWeights,
    TiltProblem, TiltingParams,
};
use crate::data::{design_matrix, BalancingDesign, EstimatingFunction, Sample};
use crate::error::{Error, Result};
use crate::linalg;

/// Weighting method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Smoothed weights from the information projection.
    Ip,
    /// Inverse of a logistic maximum-likelihood propensity.
    Mle,
    /// Empirical-likelihood calibration weights.
    Cbps,
    /// Entropy-balancing weights.
    Ebps,
    /// Doubly robust estimator with the true response probability.
    TruePiDr,
    /// Weights built from the true density ratio.
    RatioPs,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ip => "ip",
            Method::Mle => "mle",
            Method::Cbps => "cbps",
            Method::Ebps => "ebps",
            Method::TruePiDr => "true_pi_dr",
            Method::RatioPs => "ratio_ps",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ip" => Ok(Method::Ip),
            "mle" => Ok(Method::Mle),
            "cbps" => Ok(Method::Cbps),
            "ebps" => Ok(Method::Ebps),
            "true_pi_dr" => Ok(Method::TruePiDr),
            "ratio_ps" => Ok(Method::RatioPs),
            other => Err(Error::InvalidArgument(format!("unknown method `{other}`"))),
        }
    }
}

/// Settings for the weight fit and the root-finding step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorOptions {
    pub calibration: CalibrationOptions,
    /// Tolerance for the estimating-equation root.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions {
            calibration: CalibrationOptions::default(),
            tol: 1e-10,
            max_iter: 100,
        }
    }
}

/// Fit diagnostics shared by every method.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub n: usize,
    pub n_respondents: usize,
    pub weight_iterations: usize,
    pub theta_iterations: usize,
    /// Max-abs calibration residual divided by `N` (zero when the method does not calibrate).
    pub balancing_residual: f64,
    pub min_weight: f64,
    pub max_weight: f64,
    pub converged: bool,
    /// Estimate of `E{dU/dtheta'}`, filled in by variance estimation.
    pub tau: Option<Vec<Vec<f64>>>,
}

/// Point estimate with optional covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub method: Method,
    pub theta: Vec<f64>,
    pub cov: Option<Vec<Vec<f64>>>,
    pub se: Option<Vec<f64>>,
    pub diagnostics: Diagnostics,
    pub tilting: Option<TiltingParams>,
    /// Respondent weights aligned with `Sample::respondents`.
    #[serde(skip)]
    pub weights: Vec<f64>,
}

impl EstimateResult {
    /// Attach a covariance matrix and the implied standard errors.
    pub fn with_cov(mut self, cov: &DMatrix<f64>) -> Self {
        self.se = Some((0..cov.nrows()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect());
        self.cov = Some(to_rows(cov));
        self
    }

    /// Normal-theory confidence intervals at the given level.
    pub fn ci(&self, level: f64) -> Option<Vec<(f64, f64)>> {
        let se = self.se.as_ref()?;
        let z = normal_quantile(0.5 + level / 2.0);
        Some(
            self.theta
                .iter()
                .zip(se)
                .map(|(t, s)| (t - z * s, t + z * s))
                .collect(),
        )
    }
}

pub(crate) fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().cloned().collect())
        .collect()
}

pub fn normal_quantile(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::standard().inverse_cdf(p)
}

/// One term `w U(theta; x, y)` of a weighted estimating equation.
#[derive(Clone, Copy, Debug)]
pub struct WeightedUnit<'a> {
    pub w: f64,
    pub x: &'a [f64],
    pub y: &'a [f64],
}

/// Root of `n^{-1} sum_i w_i U(theta; x_i, y_i) = 0` by damped Newton with
/// the analytic Jacobian; scalar problems fall back to bisection.
/// Returns the root and the Newton iteration count.
pub fn solve_weighted(
    units: &[WeightedUnit<'_>],
    estfun: &dyn EstimatingFunction,
    n: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, usize)> {
    let p = estfun.dim();
    let eq = |theta: &[f64]| -> DVector<f64> {
        let mut g = DVector::zeros(p);
        for u in units {
            g += estfun.eval(theta, u.x, u.y) * u.w;
        }
        g / n
    };
    let jac = |theta: &[f64]| -> DMatrix<f64> {
        let mut h = DMatrix::zeros(p, p);
        for u in units {
            h += estfun.jacobian(theta, u.x, u.y) * u.w;
        }
        h / n
    };

    let mut theta = estfun.initial_guess();
    let mut g = eq(&theta);
    let mut it = 0;
    let newton = loop {
        if g.amax() <= tol {
            break Ok(());
        }
        if it >= max_iter {
            break Err(Error::NoRoot(format!("no convergence in {max_iter} Newton steps")));
        }
        it += 1;
        let Some(step) = linalg::solve_general(&jac(&theta), &(-&g)) else {
            break Err(Error::SingularTau);
        };
        let g0 = g.norm_squared();
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-10 {
            let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, b)| a + t * b).collect();
            let gt = eq(&trial);
            if gt.norm_squared() <= (1.0 - 1e-4 * t) * g0 || gt.amax() <= tol {
                theta = trial;
                g = gt;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break Err(Error::NoRoot("Newton line search failed".into()));
        }
        if t == 1.0 && step.amax() <= 1e-14 * (1.0 + linalg::max_abs(&theta)) {
            break Ok(());
        }
    };
    match newton {
        Ok(()) => Ok((theta, it)),
        Err(e) if p == 1 => bisect(|t| eq(&[t])[0], estfun.initial_guess()[0], tol)
            .map(|t| (vec![t], it))
            .map_err(|_| e),
        Err(e) => Err(e),
    }
}

fn bisect(f: impl Fn(f64) -> f64, start: f64, tol: f64) -> Result<f64> {
    let f0 = f(start);
    if f0 == 0.0 {
        return Ok(start);
    }
    let mut width = 1.0;
    let (mut lo, mut hi) = loop {
        let a = start - width;
        let b = start + width;
        if f(a).signum() != f0.signum() {
            break (a, start);
        }
        if f(b).signum() != f0.signum() {
            break (start, b);
        }
        width *= 2.0;
        if width > 1e12 {
            return Err(Error::NoRoot("no sign change found".into()));
        }
    };
    let flo = f(lo).signum();
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 || (hi - lo) <= tol * (1.0 + mid.abs()) {
            return Ok(mid);
        }
        if fm.signum() == flo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Respondent outcomes as one-element slices, in respondent order.
pub(crate) fn respondent_outcomes(sample: &Sample) -> Vec<[f64; 1]> {
    sample
        .respondents()
        .iter()
        .map(|&i| [sample.y(i).expect("respondent outcome")])
        .collect()
}

/// Solve the weighted equation with respondent weights aligned with
/// `Sample::respondents`.
pub fn solve_respondent_weighted(
    sample: &Sample,
    weights: &[f64],
    estfun: &dyn EstimatingFunction,
    opts: &EstimatorOptions,
) -> Result<(Vec<f64>, usize)> {
    let resp = sample.respondents();
    let ys = respondent_outcomes(sample);
    let units: Vec<WeightedUnit> = resp
        .iter()
        .zip(&ys)
        .zip(weights)
        .map(|((&i, y), &w)| WeightedUnit {
            w,
            x: sample.x_row(i),
            y: y.as_slice(),
        })
        .collect();
    solve_weighted(&units, estfun, sample.n() as f64, opts.tol, opts.max_iter)
}

fn finish(
    method: Method,
    sample: &Sample,
    weights: Vec<f64>,
    estfun: &dyn EstimatingFunction,
    opts: &EstimatorOptions,
    weight_iterations: usize,
    balancing_residual: f64,
    tilting: Option<TiltingParams>,
) -> Result<EstimateResult> {
    let (theta, theta_iterations) = solve_respondent_weighted(sample, &weights, estfun, opts)?;
    let min_weight = weights.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_weight = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(EstimateResult {
        method,
        theta,
        cov: None,
        se: None,
        diagnostics: Diagnostics {
            n: sample.n(),
            n_respondents: sample.n_respondents(),
            weight_iterations,
            theta_iterations,
            balancing_residual,
            min_weight,
            max_weight,
            converged: true,
            tau: None,
        },
        tilting,
        weights,
    })
}

/// Smoothed propensity-score estimate: calibrate, then solve the weighted equation.
pub fn sps_estimate(
    sample: &Sample,
    design: &BalancingDesign,
    estfun: &dyn EstimatingFunction,
    opts: &EstimatorOptions,
) -> Result<EstimateResult> {
    let (params, w) = calibrate(sample, design, &opts.calibration)?;
    sps_from_weights(sample, &params, &w, estfun, opts)
}

/// Smoothed propensity-score estimate from an existing calibration fit.
pub fn sps_from_weights(
    sample: &Sample,
    params: &TiltingParams,
    weights: &SmoothedWeights,
    estfun: &dyn EstimatingFunction,
    opts: &EstimatorOptions,
) -> Result<EstimateResult> {
    finish(
        Method::Ip,
        sample,
        weights.omega.clone(),
        estfun,
        opts,
        weights.iterations,
        weights.residual,
        Some(params.clone()),
    )
}

/// Coefficients of the regression of `v` on `z` over respondents with
/// weights `e` (the fitted density ratios).
pub(crate) fn tilt_regression(z: &[f64], k: usize, e: &[f64], v: &[f64]) -> Result<DVector<f64>> {
    let mut a = DMatrix::zeros(k, k);
    let mut b = DVector::zeros(k);
    for ((r, &ei), &vi) in z.chunks_exact(k).zip(e).zip(v) {
        for p in 0..k {
            b[p] += ei * r[p] * vi;
            for q in 0..k {
                a[(p, q)] += ei * r[p] * r[q];
            }
        }
    }
    let zm = DMatrix::from_row_slice(e.len(), k, z);
    if linalg::column_scaled_rank(&zm) < k {
        return Err(Error::RankDeficient {
            rank: linalg::column_scaled_rank(&zm),
            required: k,
        });
    }
    linalg::solve_spd(&a, &b).ok_or(Error::RankDeficient { rank: k - 1, required: k })
}

/// Mean estimate in regression-imputation form: nonrespondents receive
/// `z' beta` with `beta` fitted by density-ratio weighted least squares.
pub fn regression_imputation_form(
    sample: &Sample,
    design: &BalancingDesign,
    weights: &SmoothedWeights,
) -> Result<f64> {
    let (problem, resp) = build_problem(sample, design, weights.c)?;
    let y: Vec<f64> = resp.iter().map(|&i| sample.y(i).unwrap()).collect();
    let beta = tilt_regression(&problem.z, problem.k, &weights.ratio, &y)?;
    let observed: f64 = y.iter().sum();
    let imputed: f64 = (0..problem.k).map(|j| problem.target[j] * beta[j]).sum();
    Ok((observed + imputed) / sample.n() as f64)
}

/// Mean estimate in fractional-imputation form: every nonrespondent receives
/// the density-ratio weighted respondent mean.
pub fn fractional_imputation_form(sample: &Sample, weights: &SmoothedWeights) -> f64 {
    let resp = sample.respondents();
    let mut num = 0.0;
    let mut den = 0.0;
    let mut observed = 0.0;
    for (&i, &e) in resp.iter().zip(&weights.ratio) {
        let y = sample.y(i).unwrap();
        observed += y;
        num += e * y;
        den += e;
    }
    let n0 = sample.n_nonrespondents() as f64;
    (observed + n0 * num / den) / sample.n() as f64
}

/// Logistic maximum-likelihood response probabilities on `(1, b(x))`.
pub fn logistic_propensity(sample: &Sample, design: &BalancingDesign) -> Result<Vec<f64>> {
    let zm = design_matrix(sample, design, false)?;
    let n = sample.n();
    let k = zm.ncols();
    let mut z = Vec::with_capacity(n * k);
    for i in 0..n {
        z.extend(zm.row(i).iter());
    }
    let (sp, _) = standardize(&TiltProblem::new(z, k, vec![0.0; k], 1.0)?);
    let delta: Vec<f64> = (0..n).map(|i| if sample.delta(i) { 1.0 } else { 0.0 }).collect();
    if delta.iter().all(|&d| d == 1.0) {
        return Ok(vec![1.0; n]);
    }

    let loglik = |g: &[f64]| -> f64 {
        sp.z.chunks_exact(k)
            .zip(&delta)
            .map(|(r, &d)| {
                let eta = linalg::dot(g, r);
                // log(1 + e^eta) computed stably
                let l1p = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
                d * eta - l1p
            })
            .sum()
    };
    let mut gamma = vec![0.0; k];
    let mut ll = loglik(&gamma);
    let mut converged = false;
    for _ in 0..200 {
        let mut grad = DVector::zeros(k);
        let mut info = DMatrix::zeros(k, k);
        for (r, &d) in sp.z.chunks_exact(k).zip(&delta) {
            let p = 1.0 / (1.0 + (-linalg::dot(&gamma, r)).exp());
            let w = p * (1.0 - p);
            for a in 0..k {
                grad[a] += (d - p) * r[a];
                for b in 0..k {
                    info[(a, b)] += w * r[a] * r[b];
                }
            }
        }
        let Some(step) = linalg::solve_spd(&info, &grad) else {
            return Err(Error::Separation);
        };
        let mut t = 1.0;
        let mut next = None;
        while t > 1e-10 {
            let trial: Vec<f64> = gamma.iter().zip(step.iter()).map(|(g, s)| g + t * s).collect();
            let lt = loglik(&trial);
            if lt >= ll - 1e-12 * ll.abs() {
                next = Some((trial, lt));
                break;
            }
            t *= 0.5;
        }
        let Some((trial, lt)) = next else { break };
        let change = (lt - ll).abs();
        gamma = trial;
        ll = lt;
        if linalg::max_abs(&gamma) > 40.0 {
            return Err(Error::Separation);
        }
        if t * step.amax() < 1e-10 && change < 1e-12 * (1.0 + ll.abs()) {
            converged = true;
            break;
        }
    }
    let pi: Vec<f64> = sp
        .z
        .chunks_exact(k)
        .map(|r| 1.0 / (1.0 + (-linalg::dot(&gamma, r)).exp()))
        .collect();
    // fitted probabilities pinned at 0 or 1 on respondents signal a diverging MLE
    let extreme = pi
        .iter()
        .zip(&delta)
        .any(|(&p, &d)| d == 1.0 && p < 1e-12 || d == 0.0 && p > 1.0 - 1e-12);
    if !converged || extreme {
        return Err(Error::Separation);
    }
    Ok(pi)
}

/// Inverse of the logistic maximum-likelihood response probability.
pub fn mle_ipw_estimate(
    sample: &Sample,
    covariates: &BalancingDesign,
    estfun: &dyn EstimatingFunction,
    opts: &EstimatorOptions,
) -> Result<EstimateResult> {
    let pi = logistic_propensity(sample, covariates)?;
    let weights: Vec<f64> = sample.respondents().iter().map(|&i| 1.0 / pi[i]).collect();
    let resid = crate::calibration::balancing_residual(sample, covariates, &weights)?;
    finish(Method::Mle, sample, weights, estfun, opts, 0, resid, None)
}

/// Empirical-likelihood calibration: maximize `sum log w_i` subject to
/// `sum_{resp} w_i z_i = sum_i z_i`. Dual weights are `1 / (mu' z_i)`.
pub fn cbps_el_weights(sample: &Sample, design: &BalancingDesign, opts: &EstimatorOptions) -> Result<(Vec<f64>, usize, f64)> {
    let (problem, _) = build_problem(sample, design, 1.0)?;
    let k = problem.k;
    let n = sample.n() as f64;
    let n1 = sample.n_respondents() as f64;
    // full-sample totals
    let mut total = problem.target.clone();
    for r in problem.z.chunks_exact(k) {
        for j in 0..k {
            total[j] += r[j];
        }
    }
    let full = TiltProblem::new(problem.z.clone(), k, total, 1.0)?;
    let (sp, st) = standardize(&full);
    let t = &sp.target;

    let dual = |mu: &[f64]| -> Option<f64> {
        let mut s = linalg::dot(mu, t);
        for r in sp.z.chunks_exact(k) {
            let v = linalg::dot(mu, r);
            if !(v > 0.0) {
                return None;
            }
            s -= v.ln();
        }
        Some(s)
    };
    let grad_hess = |mu: &[f64]| -> (DVector<f64>, DMatrix<f64>, Vec<f64>) {
        let mut g = DVector::from_column_slice(t);
        let mut h = DMatrix::zeros(k, k);
        let mut w = Vec::with_capacity(sp.rows());
        for r in sp.z.chunks_exact(k) {
            let wi = 1.0 / linalg::dot(mu, r);
            w.push(wi);
            for a in 0..k {
                g[a] -= wi * r[a];
                for b in 0..k {
                    h[(a, b)] += wi * wi * r[a] * r[b];
                }
            }
        }
        (g, h, w)
    };
    let resid_orig = |g: &DVector<f64>| -> f64 {
        let mut m = g[0].abs();
        for j in 0..st.mean.len() {
            m = m.max((st.mean[j] * g[0] + st.sd[j] * g[j + 1]).abs());
        }
        m / n
    };

    let mut mu = vec![0.0; k];
    mu[0] = n1 / n;
    let mut d = dual(&mu).ok_or(Error::NonPositiveWeight)?;
    let tol = opts.calibration.tol;
    for it in 0..opts.calibration.max_iter {
        let (g, h, w) = grad_hess(&mu);
        let res = resid_orig(&g);
        if res <= tol {
            return Ok((w.iter().map(|&v| v).collect(), it, res));
        }
        let step = linalg::solve_spd(&h, &(-&g)).ok_or(Error::SingularJacobian)?;
        let slope = g.dot(&step);
        let mut s = 1.0;
        loop {
            let trial: Vec<f64> = mu.iter().zip(step.iter()).map(|(m, d)| m + s * d).collect();
            if let Some(dt) = dual(&trial) {
                // near the optimum the dual is flat to roundoff; judge by the residual
                let flat = (dt - d).abs() <= 1e-12 * d.abs().max(1.0) && resid_orig(&grad_hess(&trial).0) < res;
                if dt <= d + 1e-4 * s * slope || flat {
                    mu = trial;
                    d = dt;
                    break;
                }
            }
            s *= 0.5;
            if s < 1e-14 {
                return Err(Error::NonPositiveWeight);
            }
        }
        if linalg::max_abs(&mu) > 1e8 || d < -1e12 * n {
            return Err(Error::Infeasible { pattern: None });
        }
    }
    let (g, _, w) = grad_hess(&mu);
    let res = resid_orig(&g);
    if res <= tol * 1e3 {
        return Ok((w, opts.calibration.max_iter, res));
    }
    Err(Error::Infeasible { pattern: None })
}

pub fn cbps_el_estimate(
    sample: &Sample,
    design: &BalancingDesign,
    estfun: &dyn EstimatingFunction,
    opts: &EstimatorOptions,
) -> Result<EstimateResult> {
    let (weights, it, res) = cbps_el_weights(sample, design, opts)?;
    finish(Method::Cbps, sample, weights, estfun, opts, it, res, None)
}

/// Entropy-balancing weights `exp(gamma' z_i)` meeting the full-sample totals.
pub fn ebps_weights(sample: &Sample, design: &BalancingDesign, opts: &EstimatorOptions) -> Result<(Vec<f64>, usize, f64)> {
    let (problem, _) = build_problem(sample, design, 1.0)?;
    let k = problem.k;
    let mut total = problem.target.clone();
    for r in problem.z.chunks_exact(k) {
        for j in 0..k {
            total[j] += r[j];
        }
    }
    let full = TiltProblem::new(problem.z, k, total, 1.0)?;
    let mut copts = opts.calibration.clone();
    let n = sample.n() as f64;
    let n1 = sample.n_respondents() as f64;
    if copts.start.is_none() {
        let mut s = vec![0.0; k];
        s[0] = (n / n1).ln();
        copts.start = Some(s);
    }
    let fit = solve_tilt(&full, n, &copts, None)?;
    Ok((fit.e, fit.iterations, fit.residual))
}

pub fn ebps_estimate(
    sample: &Sample,
    design: &BalancingDesign,
    estfun: &dyn EstimatingFunction,
    opts: &EstimatorOptions,
) -> Result<EstimateResult> {
    let (weights, it, res) = ebps_weights(sample, design, opts)?;
    finish(Method::Ebps, sample, weights, estfun, opts, it, res, None)
}

/// Doubly robust estimator with known response probabilities `true_pi`
/// (one per unit). The outcome working model is the density-ratio weighted
/// linear fit on `(1, b(x))`; with `force_zero_projection` it is dropped and
/// the estimator reduces to the Horvitz-Thompson form.
pub fn true_pi_dr_estimate(
    sample: &Sample,
    true_pi: &[f64],
    design: &BalancingDesign,
    estfun: &dyn EstimatingFunction,
    opts: &EstimatorOptions,
    force_zero_projection: bool,
) -> Result<EstimateResult> {
    if true_pi.len() != sample.n() {
        return Err(Error::DimensionMismatch(format!(
            "{} probabilities for {} units",
            true_pi.len(),
            sample.n()
        )));
    }
    if true_pi.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::InvalidArgument("true probabilities must lie in (0, 1]".into()));
    }
    let resp = sample.respondents();
    let mut a: Vec<f64> = resp.iter().map(|&i| 1.0 / true_pi[i]).collect();
    let mut tilting = None;
    let mut iterations = 0;
    let mut residual = 0.0;
    if !force_zero_projection {
        let (params, w) = calibrate(sample, design, &opts.calibration)?;
        let zm = design_matrix(sample, design, false)?;
        let k = zm.ncols();
        // sum_i (1 - delta_i / pi_i) z_i
        let mut h = DVector::zeros(k);
        for i in 0..sample.n() {
            let f = 1.0 - if sample.delta(i) { 1.0 / true_pi[i] } else { 0.0 };
            h += zm.row(i).transpose() * f;
        }
        let mut gram = DMatrix::zeros(k, k);
        for (&i, &e) in resp.iter().zip(&w.ratio) {
            let r = zm.row(i).transpose();
            gram += &r * r.transpose() * e;
        }
        let v = linalg::solve_spd(&gram, &h).ok_or(Error::RankDeficient { rank: k - 1, required: k })?;
        for ((aj, &i), &e) in a.iter_mut().zip(&resp).zip(&w.ratio) {
            *aj += e * zm.row(i).transpose().dot(&v);
        }
        iterations = w.iterations;
        residual = w.residual;
        tilting = Some(params);
    }
    finish(Method::TruePiDr, sample, a, estfun, opts, iterations, residual, tilting)
}

/// Propensity weights `1 + (N0 / N1) r(x_i)` from a known density ratio
/// (`ratio` has one entry per unit).
pub fn ratio_ps_estimate(
    sample: &Sample,
    ratio: &[f64],
    estfun: &dyn EstimatingFunction,
    opts: &EstimatorOptions,
) -> Result<EstimateResult> {
    if ratio.len() != sample.n() {
        return Err(Error::DimensionMismatch(format!(
            "{} ratios for {} units",
            ratio.len(),
            sample.n()
        )));
    }
    let c = sample.n_nonrespondents() as f64 / sample.n_respondents() as f64;
    let weights: Vec<f64> = sample.respondents().iter().map(|&i| 1.0 + c * ratio[i]).collect();
    finish(Method::RatioPs, sample, weights, estfun, opts, 0, f64::NAN, None)
}

/// Dispatch on a method that needs only the sample and a design.
pub fn estimate(
    method: Method,
    sample: &Sample,
    design: &BalancingDesign,
    estfun: &dyn EstimatingFunction,
    opts: &EstimatorOptions,
) -> Result<EstimateResult> {
    match method {
        Method::Ip => sps_estimate(sample, design, estfun, opts),
        Method::Mle => mle_ipw_estimate(sample, design, estfun, opts),
        Method::Cbps => cbps_el_estimate(sample, design, estfun, opts),
        Method::Ebps => ebps_estimate(sample, design, estfun, opts),
        Method::TruePiDr | Method::RatioPs => Err(Error::InvalidArgument(format!(
            "method `{}` needs the true response mechanism",
            method.as_str()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Indicator, LeastSquares, Mean};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn oracle_sample() -> Sample {
        let rows: Vec<Vec<f64>> = [1.0, 2.0, 1.5, 1.5].iter().map(|&v| vec![v]).collect();
        Sample::from_rows(&rows, vec![Some(3.0), Some(5.0), None, None]).unwrap()
    }

    pub(crate) fn random_sample(seed: u64, n: usize, d: usize) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let x: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let p = 1.0 / (1.0 + (-(0.4 + 0.6 * x[0])).exp());
            let yi = 1.0 + x.iter().sum::<f64>() + x[0] * x[0] + rng.sample::<f64, _>(StandardNormal);
            y.push(if rng.random::<f64>() < p { Some(yi) } else { None });
            rows.push(x);
        }
        Sample::from_rows(&rows, y).unwrap()
    }

    #[test]
    fn oracle_weights_give_four_for_every_method() {
        let s = oracle_sample();
        let d = BalancingDesign::identity(1);
        let o = EstimatorOptions::default();
        for m in [Method::Ip, Method::Cbps, Method::Ebps] {
            let r = estimate(m, &s, &d, &Mean::scalar(), &o).unwrap();
            assert!((r.theta[0] - 4.0).abs() < 1e-10, "{m:?}: {}", r.theta[0]);
            for w in &r.weights {
                assert!((w - 2.0).abs() < 1e-9, "{m:?}");
            }
        }
    }

    #[test]
    fn full_response_gives_sample_mean() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let y: Vec<Option<f64>> = [1.0, 4.0, 2.0, 8.0, 5.0].iter().map(|&v| Some(v)).collect();
        let s = Sample::from_rows(&rows, y).unwrap();
        let d = BalancingDesign::identity(1);
        let o = EstimatorOptions::default();
        for m in [Method::Ip, Method::Cbps, Method::Ebps] {
            let r = estimate(m, &s, &d, &Mean::scalar(), &o).unwrap();
            assert!((r.theta[0] - 4.0).abs() < 1e-12, "{m:?}");
            assert!(r.weights.iter().all(|&w| (w - 1.0).abs() < 1e-12));
        }
        let w = calibrate(&s, &d, &Default::default()).unwrap().1;
        assert!((regression_imputation_form(&s, &d, &w).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn intercept_only_weights_are_n_over_n1() {
        let s = random_sample(1, 200, 2);
        let d = BalancingDesign::intercept_only();
        let o = EstimatorOptions::default();
        let target = s.n() as f64 / s.n_respondents() as f64;
        for m in [Method::Ip, Method::Cbps, Method::Ebps] {
            let r = estimate(m, &s, &d, &Mean::scalar(), &o).unwrap();
            for w in &r.weights {
                assert!((w - target).abs() < 1e-10, "{m:?}");
            }
        }
    }

    #[test]
    fn constant_outcome_is_reproduced() {
        let s = random_sample(2, 300, 2).map_outcome(|_| 7.5);
        let d = BalancingDesign::identity(2);
        let w = calibrate(&s, &d, &Default::default()).unwrap().1;
        assert!((regression_imputation_form(&s, &d, &w).unwrap() - 7.5).abs() < 1e-10);
    }

    #[test]
    fn regression_and_fractional_forms_match_weighting() {
        for seed in 0..20 {
            let s = random_sample(seed, 300, 3);
            let d = BalancingDesign::identity(3);
            let o = EstimatorOptions::default();
            let (p, w) = calibrate(&s, &d, &o.calibration).unwrap();
            let r = sps_from_weights(&s, &p, &w, &Mean::scalar(), &o).unwrap();
            let reg = regression_imputation_form(&s, &d, &w).unwrap();
            let frac = fractional_imputation_form(&s, &w);
            assert!((r.theta[0] - reg).abs() < 1e-10, "seed {seed}");
            assert!((r.theta[0] - frac).abs() < 1e-10, "seed {seed}");
        }
    }

    #[test]
    fn ipw_with_uninformative_response_is_close_to_respondent_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..2000).map(|_| vec![rng.sample::<f64, _>(StandardNormal)]).collect();
        let y: Vec<Option<f64>> = rows
            .iter()
            .map(|x| {
                let v = 2.0 + x[0];
                if rng.random::<f64>() < 0.7 { Some(v) } else { None }
            })
            .collect();
        let s = Sample::from_rows(&rows, y).unwrap();
        let pi = logistic_propensity(&s, &BalancingDesign::identity(1)).unwrap();
        let h = s.n_respondents() as f64 / s.n() as f64;
        assert!(pi.iter().all(|p| (p - h).abs() < 0.06));
        let r = mle_ipw_estimate(&s, &BalancingDesign::identity(1), &Mean::scalar(), &Default::default()).unwrap();
        let resp_mean = s.respondents().iter().map(|&i| s.y(i).unwrap()).sum::<f64>() / s.n_respondents() as f64;
        assert!((r.theta[0] - resp_mean).abs() < 0.05);
    }

    #[test]
    fn separated_response_is_reported() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
        let y = (0..8).map(|i| if i >= 4 { Some(1.0) } else { None }).collect();
        let s = Sample::from_rows(&rows, y).unwrap();
        let r = mle_ipw_estimate(&s, &BalancingDesign::identity(1), &Mean::scalar(), &Default::default());
        assert!(matches!(r, Err(Error::Separation)), "{r:?}");
    }

    #[test]
    fn true_pi_dr_special_cases() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let y: Vec<Option<f64>> = [1.0, 3.0, 2.0, 6.0, 5.0, 7.0].iter().map(|&v| Some(v)).collect();
        let s = Sample::from_rows(&rows, y).unwrap();
        let d = BalancingDesign::identity(1);
        let o = EstimatorOptions::default();
        let r = true_pi_dr_estimate(&s, &[1.0; 6], &d, &Mean::scalar(), &o, false).unwrap();
        assert!((r.theta[0] - 4.0).abs() < 1e-12);

        let s = random_sample(4, 200, 1);
        let pi = vec![0.6; s.n()];
        let ht = true_pi_dr_estimate(&s, &pi, &d, &Mean::scalar(), &o, true).unwrap();
        let manual: f64 = s.respondents().iter().map(|&i| s.y(i).unwrap() / 0.6).sum::<f64>();
        let total_w = s.n_respondents() as f64 / 0.6;
        assert!((ht.theta[0] - manual / total_w).abs() < 1e-12);
    }

    #[test]
    fn least_squares_and_indicator_solve() {
        let s = random_sample(6, 400, 2);
        let d = BalancingDesign::identity(2);
        let o = EstimatorOptions::default();
        let r = sps_estimate(&s, &d, &LeastSquares::new(2), &o).unwrap();
        assert_eq!(r.theta.len(), 3);
        let ind = sps_estimate(&s.map_outcome(|y| y), &d, &Mean::scalar(), &o).unwrap();
        assert!(ind.theta[0].is_finite());
        let frac = Indicator { a: 0, b: 0 };
        let r = sps_estimate(&s, &d, &frac, &o).unwrap();
        assert!((r.theta[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn bisection_finds_scalar_root() {
        let root = bisect(|t| (t - 2.5).powi(3), 0.0, 1e-12).unwrap();
        assert!((root - 2.5).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn mean_is_location_scale_equivariant(seed in 0u64..5000, a in 0.2f64..3.0, b in -5.0f64..5.0) {
            let s = random_sample(seed, 250, 2);
            let t = s.map_outcome(|y| a * y + b);
            let d = BalancingDesign::identity(2);
            let o = EstimatorOptions::default();
            for m in [Method::Ip, Method::Mle, Method::Cbps, Method::Ebps] {
                let (Ok(r0), Ok(r1)) = (estimate(m, &s, &d, &Mean::scalar(), &o), estimate(m, &t, &d, &Mean::scalar(), &o)) else { continue };
                prop_assert!((r1.theta[0] - (a * r0.theta[0] + b)).abs() < 1e-9 * (1.0 + r1.theta[0].abs()));
            }
        }
    }
}
