//! Exponential-tilting calibration for the log-linear density-ratio model.
//!
//! For respondents the fitted ratio is `r(x) = exp(lambda0 + lambda1' b(x))`
//! and the smoothed weight is `1 + c r(x)` with `c = N0 / N1`. The
//! parameters solve `c sum_{resp} r_i z_i = sum_{nonresp} z_i`, the
//! respondent-total form of `sum_{resp} w_i z_i = sum_i z_i`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{design_matrix, BalancingDesign, Sample};
use crate::error::{Error, Result};
use crate::linalg;

/// Solver settings for the calibration system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationOptions {
    /// Tolerance on the max-abs balancing residual divided by `N`.
    pub tol: f64,
    pub max_iter: usize,
    /// Replace `N0 / N1` by an externally known ratio. With an intercept in
    /// the design this moves `lambda0` only; the weights are unchanged.
    pub c_override: Option<f64>,
    /// Starting value on the original scale, `(lambda0, lambda1)`.
    pub start: Option<Vec<f64>>,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            tol: 1e-10,
            max_iter: 100,
            c_override: None,
            start: None,
        }
    }
}

/// Respondent mean and sd of each balancing function, used to condition Newton.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardization {
    fn identity(l: usize) -> Self {
        Standardization {
            mean: vec![0.0; l],
            sd: vec![1.0; l],
        }
    }

    /// Original-scale `(lambda0, lambda1)` from standardized coordinates.
    pub fn to_original(&self, lambda_std: &[f64]) -> Vec<f64> {
        let mut out = lambda_std.to_vec();
        for j in 0..self.mean.len() {
            out[j + 1] = lambda_std[j + 1] / self.sd[j];
            out[0] -= lambda_std[j + 1] * self.mean[j] / self.sd[j];
        }
        out
    }

    pub fn to_standardized(&self, lambda: &[f64]) -> Vec<f64> {
        let mut out = lambda.to_vec();
        for j in 0..self.mean.len() {
            out[j + 1] = lambda[j + 1] * self.sd[j];
            out[0] += lambda[j + 1] * self.mean[j];
        }
        out
    }

    fn apply(&self, row: &[f64], out: &mut [f64]) {
        out[0] = row[0];
        for j in 0..self.mean.len() {
            out[j + 1] = (row[j + 1] - self.mean[j]) / self.sd[j];
        }
    }
}

/// Fitted density-ratio parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TiltingParams {
    pub lambda0: f64,
    pub lambda1: Vec<f64>,
    /// Parameters in the solver's standardized coordinates.
    pub lambda_std: Vec<f64>,
    pub standardization: Standardization,
    pub design: BalancingDesign,
    /// Ratio multiplying the density ratio in the weights.
    pub c: f64,
    pub iterations: usize,
    /// Max-abs balancing residual divided by `N`.
    pub residual: f64,
}

impl TiltingParams {
    /// `exp(lambda' z)` evaluated through the standardized coordinates, which
    /// is how the solver computes it.
    pub fn ratio_at(&self, x: &[f64]) -> f64 {
        let mut z = Vec::with_capacity(self.design.len() + 1);
        z.push(1.0);
        z.extend(self.design.eval(x));
        let mut zs = vec![0.0; z.len()];
        self.standardization.apply(&z, &mut zs);
        linalg::dot(&self.lambda_std, &zs).exp()
    }
}

/// Per-respondent smoothed weights with balancing diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothedWeights {
    /// Sample indices of the respondents, increasing.
    pub respondents: Vec<usize>,
    /// Weight of each respondent, aligned with `respondents`.
    pub omega: Vec<f64>,
    /// Fitted density ratio `exp(lambda' z_i)` of each respondent.
    pub ratio: Vec<f64>,
    pub c: f64,
    pub residual: f64,
    pub iterations: usize,
}

impl SmoothedWeights {
    /// Weights spread over all `n` units, zero for nonrespondents.
    pub fn full(&self, n: usize) -> Vec<f64> {
        let mut w = vec![0.0; n];
        for (&i, &o) in self.respondents.iter().zip(&self.omega) {
            w[i] = o;
        }
        w
    }

    pub fn sum(&self) -> f64 {
        self.omega.iter().sum()
    }
}

/// The moment system `c sum_i exp(lambda' z_i) z_i = target` over a fixed
/// set of rows `z_i` (row-major, `k` columns with the intercept first).
#[derive(Clone, Debug)]
pub struct TiltProblem {
    pub(crate) z: Vec<f64>,
    pub(crate) k: usize,
    pub(crate) target: Vec<f64>,
    pub(crate) c: f64,
}

impl TiltProblem {
    pub fn new(z: Vec<f64>, k: usize, target: Vec<f64>, c: f64) -> Result<Self> {
        if k == 0 || z.len() % k != 0 || target.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "tilt problem with {} cells, k = {k}, target length {}",
                z.len(),
                target.len()
            )));
        }
        Ok(TiltProblem { z, k, target, c })
    }

    pub fn rows(&self) -> usize {
        self.z.len() / self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.z[i * self.k..(i + 1) * self.k]
    }

    pub fn exp_weights(&self, lambda: &[f64]) -> Vec<f64> {
        self.z
            .chunks_exact(self.k)
            .map(|r| linalg::dot(lambda, r).exp())
            .collect()
    }

    /// `c sum_i e_i z_i - target`.
    pub fn residual(&self, lambda: &[f64]) -> Vec<f64> {
        let e = self.exp_weights(lambda);
        self.residual_from(&e)
    }

    fn residual_from(&self, e: &[f64]) -> Vec<f64> {
        let mut f = vec![0.0; self.k];
        for (r, &ei) in self.z.chunks_exact(self.k).zip(e) {
            for j in 0..self.k {
                f[j] += ei * r[j];
            }
        }
        for j in 0..self.k {
            f[j] = self.c * f[j] - self.target[j];
        }
        f
    }

    /// `c sum_i e_i z_i z_i'`.
    pub fn jacobian(&self, lambda: &[f64]) -> DMatrix<f64> {
        let e = self.exp_weights(lambda);
        self.jacobian_from(&e)
    }

    fn jacobian_from(&self, e: &[f64]) -> DMatrix<f64> {
        let k = self.k;
        let mut jac = vec![0.0; k * k];
        for (r, &ei) in self.z.chunks_exact(k).zip(e) {
            for a in 0..k {
                let v = ei * r[a];
                for b in a..k {
                    jac[a * k + b] += v * r[b];
                }
            }
        }
        let mut m = DMatrix::zeros(k, k);
        for a in 0..k {
            for b in a..k {
                m[(a, b)] = self.c * jac[a * k + b];
                m[(b, a)] = m[(a, b)];
            }
        }
        m
    }
}

/// Outcome of a tilt solve.
#[derive(Clone, Debug)]
pub(crate) struct TiltFit {
    pub lambda_std: Vec<f64>,
    pub standardization: Standardization,
    /// `exp(lambda' z_i)` per row.
    pub e: Vec<f64>,
    pub iterations: usize,
    /// Original-scale max-abs residual divided by `scale`.
    pub residual: f64,
}

pub(crate) fn standardize(problem: &TiltProblem) -> (TiltProblem, Standardization) {
    let k = problem.k;
    let n = problem.rows();
    if k == 1 || n == 0 {
        return (problem.clone(), Standardization::identity(k - 1));
    }
    let mut mean = vec![0.0; k - 1];
    for r in problem.z.chunks_exact(k) {
        for j in 1..k {
            mean[j - 1] += r[j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut sd = vec![0.0; k - 1];
    for r in problem.z.chunks_exact(k) {
        for j in 1..k {
            let d = r[j] - mean[j - 1];
            sd[j - 1] += d * d;
        }
    }
    for s in &mut sd {
        *s = (*s / n as f64).sqrt();
        if !(*s > 0.0) || !s.is_finite() {
            *s = 1.0;
        }
    }
    let st = Standardization { mean, sd };
    let mut z = vec![0.0; problem.z.len()];
    for (src, dst) in problem.z.chunks_exact(k).zip(z.chunks_exact_mut(k)) {
        st.apply(src, dst);
    }
    // target totals transform like sums of rows
    let t0 = problem.target[0];
    let mut target = vec![t0; k];
    for j in 1..k {
        target[j] = (problem.target[j] - st.mean[j - 1] * t0) / st.sd[j - 1];
    }
    (
        TiltProblem {
            z,
            k,
            target,
            c: problem.c,
        },
        st,
    )
}

fn original_residual(fs: &[f64], st: &Standardization, scale: f64) -> f64 {
    let mut m = fs[0].abs();
    for j in 0..st.mean.len() {
        m = m.max((st.mean[j] * fs[0] + st.sd[j] * fs[j + 1]).abs());
    }
    m / scale
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

const LAMBDA_BOUND: f64 = 50.0;
const GROWTH_LIMIT: usize = 10;

/// Damped Newton with step halving on the squared residual norm, run in
/// standardized coordinates.
pub(crate) fn solve_tilt(
    problem: &TiltProblem,
    scale: f64,
    opts: &CalibrationOptions,
    pattern: Option<usize>,
) -> Result<TiltFit> {
    let (sp, st) = standardize(problem);
    let k = sp.k;
    let infeasible = Error::Infeasible { pattern };
    let mut lambda = match &opts.start {
        Some(s) if s.len() == k => st.to_standardized(s),
        Some(s) => {
            return Err(Error::DimensionMismatch(format!(
                "start has length {}, expected {k}",
                s.len()
            )))
        }
        None => vec![0.0; k],
    };
    let mut e = sp.exp_weights(&lambda);
    let mut f = sp.residual_from(&e);
    let mut res = original_residual(&f, &st, scale);
    let mut prev_step = f64::INFINITY;
    let mut growth = 0usize;
    let mut iterations = 0usize;

    while !(res <= opts.tol) {
        if iterations >= opts.max_iter {
            return Err(if linalg::max_abs(&lambda) > LAMBDA_BOUND / 2.0 {
                infeasible
            } else {
                Error::MaxIterations(opts.max_iter)
            });
        }
        iterations += 1;
        let jac = sp.jacobian_from(&e);
        let rhs = -DVector::from_column_slice(&f);
        let dir = linalg::solve_spd(&jac, &rhs).ok_or(Error::SingularJacobian)?;
        let phi0 = sq_norm(&f);
        let mut t = 1.0;
        let accepted = loop {
            let trial: Vec<f64> = lambda.iter().zip(dir.iter()).map(|(l, d)| l + t * d).collect();
            let te = sp.exp_weights(&trial);
            let tf = sp.residual_from(&te);
            let phi = sq_norm(&tf);
            if phi.is_finite() && phi <= (1.0 - 2e-4 * t) * phi0 {
                break Some((trial, te, tf));
            }
            t *= 0.5;
            if t < 1e-12 {
                break None;
            }
        };
        let Some((trial, te, tf)) = accepted else {
            // no descent possible: either diverging or at the floating-point floor
            if linalg::max_abs(&lambda) > LAMBDA_BOUND / 2.0 {
                return Err(infeasible);
            }
            if res <= opts.tol * 1e3 {
                break;
            }
            return Err(Error::NoConvergence(format!(
                "calibration line search stalled at residual {res:e}"
            )));
        };
        let step = t * dir.norm();
        if t < 1.0 && step > prev_step {
            growth += 1;
        } else {
            growth = 0;
        }
        prev_step = step;
        lambda = trial;
        e = te;
        f = tf;
        res = original_residual(&f, &st, scale);
        if linalg::max_abs(&lambda) > LAMBDA_BOUND || growth >= GROWTH_LIMIT {
            return Err(infeasible);
        }
    }

    // one extra Newton step, kept only when it tightens the residual
    if iterations > 0 {
        let jac = sp.jacobian_from(&e);
        if let Some(dir) = linalg::solve_spd(&jac, &(-DVector::from_column_slice(&f))) {
            let trial: Vec<f64> = lambda.iter().zip(dir.iter()).map(|(l, d)| l + d).collect();
            let te = sp.exp_weights(&trial);
            let tf = sp.residual_from(&te);
            let tres = original_residual(&tf, &st, scale);
            if tres < res {
                lambda = trial;
                e = te;
                res = tres;
            }
        }
    }

    Ok(TiltFit {
        lambda_std: lambda,
        standardization: st,
        e,
        iterations,
        residual: res,
    })
}

/// Respondent design rows and nonrespondent totals for a sample.
pub(crate) fn build_problem(sample: &Sample, design: &BalancingDesign, c: f64) -> Result<(TiltProblem, Vec<usize>)> {
    let z = design_matrix(sample, design, false)?;
    let k = z.ncols();
    let resp = sample.respondents();
    let mut rows = Vec::with_capacity(resp.len() * k);
    let mut target = vec![0.0; k];
    for i in 0..sample.n() {
        if sample.delta(i) {
            rows.extend(z.row(i).iter());
        } else {
            for j in 0..k {
                target[j] += z[(i, j)];
            }
        }
    }
    Ok((TiltProblem::new(rows, k, target, c)?, resp))
}

/// Fit the tilting parameters and the smoothed weights together.
pub fn calibrate(
    sample: &Sample,
    design: &BalancingDesign,
    opts: &CalibrationOptions,
) -> Result<(TiltingParams, SmoothedWeights)> {
    let n1 = sample.n_respondents();
    let n0 = sample.n_nonrespondents();
    if n1 < design.len() + 1 {
        return Err(Error::RankDeficient {
            rank: n1,
            required: design.len() + 1,
        });
    }
    let c = n0 as f64 / n1 as f64;
    let (problem, resp) = build_problem(sample, design, c)?;
    let k = problem.k;
    let n = sample.n() as f64;

    let fit = if n0 == 0 {
        TiltFit {
            lambda_std: vec![0.0; k],
            standardization: Standardization::identity(k - 1),
            e: vec![1.0; n1],
            iterations: 0,
            residual: 0.0,
        }
    } else {
        solve_tilt(&problem, n, opts, None)?
    };

    let omega: Vec<f64> = if n0 == 0 {
        vec![1.0; n1]
    } else {
        fit.e.iter().map(|&e| 1.0 + c * e).collect()
    };

    let mut lambda_std = fit.lambda_std.clone();
    let mut c_report = c;
    if let Some(c_ext) = opts.c_override {
        if !(c_ext > 0.0) || !c_ext.is_finite() {
            return Err(Error::InvalidArgument(format!("c override must be positive, got {c_ext}")));
        }
        if n0 > 0 {
            lambda_std[0] += (c / c_ext).ln();
        }
        c_report = c_ext;
    }
    let lambda = fit.standardization.to_original(&lambda_std);
    let ratio = if n0 == 0 { vec![1.0; n1] } else { fit.e.clone() };

    let params = TiltingParams {
        lambda0: lambda[0],
        lambda1: lambda[1..].to_vec(),
        lambda_std,
        standardization: fit.standardization,
        design: design.clone(),
        c: c_report,
        iterations: fit.iterations,
        residual: fit.residual,
    };
    let weights = SmoothedWeights {
        respondents: resp,
        omega,
        ratio,
        c: c_report,
        residual: fit.residual,
        iterations: fit.iterations,
    };
    Ok((params, weights))
}

/// Solve the calibration equation for the tilting parameters.
pub fn solve_tilting(
    sample: &Sample,
    design: &BalancingDesign,
    opts: &CalibrationOptions,
) -> Result<TiltingParams> {
    calibrate(sample, design, opts).map(|(p, _)| p)
}

/// Weights `1 + c exp(lambda0 + lambda1' b(x_i))` for every respondent.
pub fn smoothed_weights(
    sample: &Sample,
    design: &BalancingDesign,
    params: &TiltingParams,
) -> Result<SmoothedWeights> {
    design.check_dimension(sample.d())?;
    let resp = sample.respondents();
    let no_nonresp = sample.n_nonrespondents() == 0;
    let ratio: Vec<f64> = if no_nonresp {
        vec![1.0; resp.len()]
    } else {
        resp.iter().map(|&i| params.ratio_at(sample.x_row(i))).collect()
    };
    let omega: Vec<f64> = if no_nonresp {
        vec![1.0; resp.len()]
    } else {
        ratio.iter().map(|&r| 1.0 + params.c * r).collect()
    };
    let mut w = SmoothedWeights {
        respondents: resp,
        omega,
        ratio,
        c: params.c,
        residual: 0.0,
        iterations: params.iterations,
    };
    w.residual = balancing_residual(sample, design, &w.omega)?;
    Ok(w)
}

/// `max_j |sum_{resp} w_i z_ij - sum_i z_ij| / N` for weights over respondents.
pub fn balancing_residual(sample: &Sample, design: &BalancingDesign, weights: &[f64]) -> Result<f64> {
    design.check_dimension(sample.d())?;
    let n1 = sample.n_respondents();
    if weights.len() != n1 {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {n1} respondents",
            weights.len()
        )));
    }
    let k = design.len() + 1;
    let mut diff = vec![0.0; k];
    let mut buf = vec![0.0; k - 1];
    let mut r = 0usize;
    for i in 0..sample.n() {
        design.eval_into(sample.x_row(i), &mut buf);
        let w = if sample.delta(i) {
            let w = weights[r];
            r += 1;
            w
        } else {
            0.0
        };
        let a = w - 1.0;
        diff[0] += a;
        for j in 0..k - 1 {
            diff[j + 1] += a * buf[j];
        }
    }
    Ok(linalg::max_abs(&diff) / sample.n() as f64)
}

/// `r(x) = exp(lambda0 + lambda1' b(x))` on the original scale.
pub fn density_ratio(params: &TiltingParams, x: &[f64]) -> f64 {
    (params.lambda0 + linalg::dot(&params.lambda1, &params.design.eval(x))).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Basis;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn sample_1d(x: &[f64], delta: &[bool]) -> Sample {
        let rows: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
        let y = delta.iter().map(|&d| if d { Some(1.0) } else { None }).collect();
        Sample::with_indicator(&rows, y, delta.to_vec()).unwrap()
    }

    fn random_sample(seed: u64, n: usize, d: usize) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let x: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let p = 1.0 / (1.0 + (-(0.3 + 0.5 * x[0])).exp());
            let yi = x.iter().sum::<f64>() + rng.sample::<f64, _>(StandardNormal);
            y.push(if rng.random::<f64>() < p { Some(yi) } else { None });
            rows.push(x);
        }
        Sample::from_rows(&rows, y).unwrap()
    }

    #[test]
    fn two_by_two_system_gives_unit_ratio() {
        let s = sample_1d(&[1.0, 2.0, 1.5, 1.5], &[true, true, false, false]);
        let (p, w) = calibrate(&s, &BalancingDesign::identity(1), &Default::default()).unwrap();
        assert!(p.lambda0.abs() < 1e-10 && p.lambda1[0].abs() < 1e-10);
        for o in &w.omega {
            assert!((o - 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn all_respond_gives_unit_weights() {
        let s = sample_1d(&[1.0, 2.0, 3.0], &[true, true, true]);
        let (p, w) = calibrate(&s, &BalancingDesign::identity(1), &Default::default()).unwrap();
        assert_eq!(p.lambda0, 0.0);
        assert_eq!(p.lambda1, vec![0.0]);
        assert!(w.omega.iter().all(|&o| o == 1.0));
    }

    #[test]
    fn targets_outside_cone_are_infeasible() {
        let s = sample_1d(&[0.0, 1.0, 2.0, 3.0], &[true, true, false, false]);
        let r = solve_tilting(&s, &BalancingDesign::identity(1), &Default::default());
        assert!(matches!(r, Err(Error::Infeasible { pattern: None })), "{r:?}");
    }

    #[test]
    fn intercept_only_weights_are_n_over_n1() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let delta: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        let s = sample_1d(&x, &delta);
        let w = calibrate(&s, &BalancingDesign::intercept_only(), &Default::default()).unwrap().1;
        for o in &w.omega {
            assert!((o - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lambda_with_equal_groups_gives_two() {
        let s = sample_1d(&[1.0, 2.0, 3.0, 4.0], &[true, false, true, false]);
        let params = TiltingParams {
            lambda0: 0.0,
            lambda1: vec![0.0],
            lambda_std: vec![0.0, 0.0],
            standardization: Standardization::identity(1),
            design: BalancingDesign::identity(1),
            c: 1.0,
            iterations: 0,
            residual: 0.0,
        };
        let w = smoothed_weights(&s, &BalancingDesign::identity(1), &params).unwrap();
        assert_eq!(w.omega, vec![2.0, 2.0]);
    }

    #[test]
    fn residual_examples() {
        let s = sample_1d(&[1.0, 2.0, 3.0, 4.0], &[true; 4]);
        let d = BalancingDesign::identity(1);
        assert_eq!(balancing_residual(&s, &d, &[1.0; 4]).unwrap(), 0.0);
        let r = balancing_residual(&s, &d, &[2.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(r >= 1.0 / 4.0);
    }

    #[test]
    fn density_ratio_examples() {
        let mut p = TiltingParams {
            lambda0: 0.0,
            lambda1: vec![0.0],
            lambda_std: vec![0.0, 0.0],
            standardization: Standardization::identity(1),
            design: BalancingDesign::identity(1),
            c: 1.0,
            iterations: 0,
            residual: 0.0,
        };
        assert_eq!(density_ratio(&p, &[3.0]), 1.0);
        p.lambda0 = 2f64.ln();
        assert!((density_ratio(&p, &[-7.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn fitted_ratio_averages_to_one_over_respondents() {
        let s = random_sample(3, 400, 3);
        let d = BalancingDesign::identity(3);
        let (p, w) = calibrate(&s, &d, &Default::default()).unwrap();
        let n1 = s.n_respondents() as f64;
        let c = s.n_nonrespondents() as f64 / n1;
        let mean: f64 = s.respondents().iter().map(|&i| density_ratio(&p, s.x_row(i))).sum::<f64>() / n1;
        // intercept constraint: c sum r = N0, so the respondent average of r is 1
        assert!((mean - 1.0).abs() < 1e-8, "{mean}");
        assert!((w.sum() - s.n() as f64).abs() < 1e-8 * s.n() as f64);
        assert!(w.residual <= 1e-10);
        assert!(w.omega.iter().all(|&o| o > 1.0));
        assert!(c > 0.0);
        let recomputed = smoothed_weights(&s, &d, &p).unwrap();
        assert_eq!(recomputed.omega, w.omega);
    }

    #[test]
    fn c_override_only_moves_intercept() {
        let s = random_sample(5, 300, 2);
        let d = BalancingDesign::identity(2);
        let (p, w) = calibrate(&s, &d, &Default::default()).unwrap();
        let opts = CalibrationOptions {
            c_override: Some(0.25),
            ..Default::default()
        };
        let (q, v) = calibrate(&s, &d, &opts).unwrap();
        assert_eq!(w.omega, v.omega);
        assert!((q.lambda1[0] - p.lambda1[0]).abs() < 1e-12);
        assert!((q.lambda0 - p.lambda0 - (w.c / 0.25).ln()).abs() < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn newton_jacobian_matches_finite_differences(
            seed in 0u64..10_000,
            lam in prop::collection::vec(-0.5f64..0.5, 3),
        ) {
            let s = random_sample(seed, 50, 2);
            let (problem, _) = build_problem(&s, &BalancingDesign::identity(2), 0.7).unwrap();
            let jac = problem.jacobian(&lam);
            for k in 0..3 {
                let h = 1e-6;
                let mut lp = lam.clone();
                let mut lm = lam.clone();
                lp[k] += h;
                lm[k] -= h;
                let fp = problem.residual(&lp);
                let fm = problem.residual(&lm);
                for r in 0..3 {
                    let fd = (fp[r] - fm[r]) / (2.0 * h);
                    prop_assert!((jac[(r, k)] - fd).abs() <= 1e-5 * (1.0 + jac[(r, k)].abs()));
                }
            }
        }

        #[test]
        fn weights_invariant_to_affine_recombination(
            seed in 0u64..10_000,
            a in prop::collection::vec(-2.0f64..2.0, 4),
            shift in prop::collection::vec(-3.0f64..3.0, 2),
        ) {
            let det = a[0] * a[3] - a[1] * a[2];
            prop_assume!(det.abs() > 0.2);
            let s = random_sample(seed, 300, 2);
            let base = BalancingDesign::identity(2);
            let Ok((_, w)) = calibrate(&s, &base, &Default::default()) else { return Ok(()); };
            // b' = A b + shift, expressed through a constant-offset linear basis
            let rows: Vec<Vec<f64>> = (0..s.n()).map(|i| {
                let x = s.x_row(i);
                vec![a[0] * x[0] + a[1] * x[1] + shift[0], a[2] * x[0] + a[3] * x[1] + shift[1]]
            }).collect();
            let y = (0..s.n()).map(|i| s.y(i)).collect();
            let s2 = Sample::from_rows(&rows, y).unwrap();
            let (_, w2) = calibrate(&s2, &base, &Default::default()).unwrap();
            for (o1, o2) in w.omega.iter().zip(&w2.omega) {
                prop_assert!((o1 - o2).abs() <= 1e-8 * o1.abs().max(1.0));
            }
        }

        #[test]
        fn solution_does_not_depend_on_start(
            seed in 0u64..10_000,
            start in prop::collection::vec(-0.3f64..0.3, 3),
        ) {
            let s = random_sample(seed, 300, 2);
            let d = BalancingDesign::new(vec![Basis::Column(0), Basis::Column(1)]);
            let Ok(p0) = solve_tilting(&s, &d, &Default::default()) else { return Ok(()); };
            let opts = CalibrationOptions { start: Some(start), ..Default::default() };
            let p1 = solve_tilting(&s, &d, &opts).unwrap();
            prop_assert!((p0.lambda0 - p1.lambda0).abs() < 1e-6);
            for (a, b) in p0.lambda1.iter().zip(&p1.lambda1) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
