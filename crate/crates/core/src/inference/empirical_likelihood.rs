//! Profile empirical likelihood for `theta` with the density-ratio
//! parameters profiled out.
//!
//! Two sets of point masses are supported. With [`ElMasses::FullSample`]
//! every unit carries a mass and the constraints are
//! `sum p_i (d_i w_i - 1) z_i = 0` and `sum p_i d_i w_i U_i(theta) = 0`,
//! where `d_i` is the response indicator, `r_i = exp(lambda' z_i)` and
//! `w_i = 1 + c r_i`. With [`ElMasses::Respondents`] only respondents carry
//! mass and the constraints are `sum p_i {(N1/N) w_i b_i - b_bar} = 0`,
//! `sum p_i w_i U_i(theta) = 0` and `sum p_i (r_i - 1) = 0`, which holds the
//! full-sample mean `b_bar` fixed.
//!
//! In the dual, `p_i = 1 / (n (1 + eta' g_i))` over the `n` mass points and
//! the log-likelihood is `-n log n - h(theta, lambda)` where
//! `h = max_eta sum log(1 + eta' g_i)`. The profile minimizes `h` over
//! `lambda`; Owen's pseudo-logarithm keeps `h` finite off the feasible set.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::calibration::{calibrate, TiltingParams};
use crate::data::{design_matrix, BalancingDesign, EstimatingFunction, Sample};
use crate::error::{Error, Result};
use crate::estimators::{sps_from_weights, EstimatorOptions};
use crate::linalg;

/// Which units carry empirical-likelihood mass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElMasses {
    /// All units; the balancing mean is estimated jointly, so the ratio
    /// statistic reflects the sampling variability of `b_bar`.
    #[default]
    FullSample,
    /// Respondents only, conditional on the observed `b_bar`.
    Respondents,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ElOptions {
    pub masses: ElMasses,
    /// Convergence threshold on the infinity norm of the profile gradient.
    pub grad_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub estimator: EstimatorOptions,
}

impl Default for ElOptions {
    fn default() -> Self {
        ElOptions {
            masses: ElMasses::default(),
            grad_tol: 1e-8,
            max_outer: 100,
            max_inner: 100,
            estimator: EstimatorOptions::default(),
        }
    }
}

/// Result of the ratio test of `theta = theta0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElTest {
    /// `2 {l_p(theta_hat) - l_p(theta0)}`, `None` when `theta0` is infeasible.
    pub statistic: Option<f64>,
    pub p_value: f64,
    pub df: usize,
    pub theta_hat: Vec<f64>,
    pub theta0: Vec<f64>,
    pub feasible: bool,
}

/// Owen's pseudo-logarithm and its first two derivatives.
fn log_star(z: f64, eps: f64) -> (f64, f64, f64) {
    if z >= eps {
        (z.ln(), 1.0 / z, -1.0 / (z * z))
    } else {
        let r = z / eps;
        (eps.ln() - 1.5 + 2.0 * r - 0.5 * r * r, (2.0 - r) / eps, -1.0 / (eps * eps))
    }
}

struct Profile {
    masses: ElMasses,
    /// Standardized design rows of the mass points.
    z: Vec<f64>,
    k: usize,
    /// Scaled estimating-function values, zero for nonrespondents.
    u: Vec<f64>,
    p: usize,
    responded: Vec<bool>,
    /// Full-sample mean of the standardized balancing functions.
    bbar: Vec<f64>,
    c: f64,
    frac: f64,
    eps: f64,
    max_inner: usize,
}

struct Eval {
    h: f64,
    grad: DVector<f64>,
    eta: DVector<f64>,
    min_w: f64,
}

impl Profile {
    fn n(&self) -> usize {
        self.responded.len()
    }

    fn m(&self) -> usize {
        self.k + self.p
    }

    /// Constraint vectors `g_i` and ratios `r_i` at `lambda`.
    fn constraints(&self, lambda: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (k, p, m) = (self.k, self.p, self.m());
        let n = self.n();
        let mut g = vec![0.0; n * m];
        let mut e = vec![0.0; n];
        for i in 0..n {
            let zi = &self.z[i * k..(i + 1) * k];
            let gi = &mut g[i * m..(i + 1) * m];
            if !self.responded[i] {
                for j in 0..k {
                    gi[j] = -zi[j];
                }
                continue;
            }
            let ei = linalg::dot(lambda, zi).exp();
            let wi = 1.0 + self.c * ei;
            e[i] = ei;
            match self.masses {
                ElMasses::FullSample => {
                    for j in 0..k {
                        gi[j] = (wi - 1.0) * zi[j];
                    }
                    for q in 0..p {
                        gi[k + q] = wi * self.u[i * p + q];
                    }
                }
                ElMasses::Respondents => {
                    for j in 1..k {
                        gi[j - 1] = self.frac * wi * zi[j] - self.bbar[j - 1];
                    }
                    for q in 0..p {
                        gi[k - 1 + q] = wi * self.u[i * p + q];
                    }
                    gi[m - 1] = ei - 1.0;
                }
            }
        }
        (g, e)
    }

    /// `eta' dg_i/dlambda` divided by `c r_i z_i`, for a respondent.
    fn directional(&self, eta: &DVector<f64>, i: usize) -> f64 {
        let (k, p, m) = (self.k, self.p, self.m());
        let zi = &self.z[i * k..(i + 1) * k];
        let ui = &self.u[i * p..(i + 1) * p];
        match self.masses {
            ElMasses::FullSample => {
                let s: f64 = (0..k).map(|j| eta[j] * zi[j]).sum::<f64>()
                    + (0..p).map(|q| eta[k + q] * ui[q]).sum::<f64>();
                self.c * s
            }
            ElMasses::Respondents => {
                let s: f64 = (1..k).map(|j| self.frac * eta[j - 1] * zi[j]).sum::<f64>()
                    + (0..p).map(|q| eta[k - 1 + q] * ui[q]).sum::<f64>();
                self.c * s + eta[m - 1]
            }
        }
    }

    /// `h(lambda)` by Newton on the concave dual, plus its envelope gradient.
    fn eval(&self, lambda: &[f64], warm: &DVector<f64>) -> Result<Eval> {
        let (k, m) = (self.k, self.m());
        let n = self.n();
        let (g, e) = self.constraints(lambda);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Infeasible { pattern: None });
        }
        let objective = |eta: &DVector<f64>| -> f64 {
            g.chunks_exact(m)
                .map(|gi| log_star(1.0 + eta.iter().zip(gi).map(|(a, b)| a * b).sum::<f64>(), self.eps).0)
                .sum()
        };
        let mut eta = warm.clone();
        let mut f = objective(&eta);
        let gtol = 1e-12 * n as f64;
        for _ in 0..self.max_inner {
            let mut grad = DVector::zeros(m);
            let mut neg_hess = DMatrix::zeros(m, m);
            for gi in g.chunks_exact(m) {
                let w = 1.0 + eta.iter().zip(gi).map(|(a, b)| a * b).sum::<f64>();
                let (_, d1, d2) = log_star(w, self.eps);
                for a in 0..m {
                    grad[a] += d1 * gi[a];
                    let v = -d2 * gi[a];
                    for b in a..m {
                        neg_hess[(a, b)] += v * gi[b];
                    }
                }
            }
            if grad.amax() <= gtol {
                break;
            }
            linalg::symmetrize_upper(&mut neg_hess);
            let Some(step) = linalg::solve_spd(&neg_hess, &grad) else {
                return Err(Error::SingularJacobian);
            };
            let slope = grad.dot(&step);
            let mut t = 1.0;
            let mut moved = false;
            while t > 1e-12 {
                let trial = &eta + &step * t;
                let ft = objective(&trial);
                if ft >= f + 1e-4 * t * slope {
                    eta = trial;
                    f = ft;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
        }

        // envelope gradient with respect to lambda
        let mut grad = DVector::zeros(k);
        let mut min_w = f64::INFINITY;
        for i in 0..n {
            let gi = &g[i * m..(i + 1) * m];
            let w = 1.0 + eta.iter().zip(gi).map(|(a, b)| a * b).sum::<f64>();
            min_w = min_w.min(w);
            if !self.responded[i] {
                continue;
            }
            let d1 = log_star(w, self.eps).1;
            let coef = d1 * e[i] * self.directional(&eta, i);
            let zi = &self.z[i * k..(i + 1) * k];
            for a in 0..k {
                grad[a] += coef * zi[a];
            }
        }
        Ok(Eval { h: f, grad, eta, min_w })
    }
}

fn build_profile(
    sample: &Sample,
    design: &BalancingDesign,
    params: &TiltingParams,
    estfun: &dyn EstimatingFunction,
    theta: &[f64],
    opts: &ElOptions,
) -> Result<Profile> {
    let zm = design_matrix(sample, design, false)?;
    let k = zm.ncols();
    let p = estfun.dim();
    let st = &params.standardization;
    let n = sample.n();
    let n1 = sample.n_respondents();

    let stdz = |i: usize, out: &mut [f64]| {
        out[0] = 1.0;
        for j in 1..k {
            out[j] = (zm[(i, j)] - st.mean[j - 1]) / st.sd[j - 1];
        }
    };
    let mut bbar = vec![0.0; k - 1];
    let mut buf = vec![0.0; k];
    for i in 0..n {
        stdz(i, &mut buf);
        for j in 1..k {
            bbar[j - 1] += buf[j];
        }
    }
    for b in &mut bbar {
        *b /= n as f64;
    }
    let units: Vec<usize> = match opts.masses {
        ElMasses::FullSample => (0..n).collect(),
        ElMasses::Respondents => sample.respondents(),
    };
    let mut z = Vec::with_capacity(units.len() * k);
    let mut u = Vec::with_capacity(units.len() * p);
    let mut responded = Vec::with_capacity(units.len());
    for &i in &units {
        stdz(i, &mut buf);
        z.extend_from_slice(&buf);
        match sample.y(i) {
            Some(y) => {
                u.extend(estfun.eval(theta, sample.x_row(i), &[y]).iter());
                responded.push(true);
            }
            None => {
                u.extend(std::iter::repeat_n(0.0, p));
                responded.push(false);
            }
        }
    }
    // a component of U with one sign on every respondent cannot average to zero
    for q in 0..p {
        let col = u.iter().skip(q).step_by(p);
        let (mut pos, mut neg) = (false, false);
        for &v in col {
            pos |= v > 0.0;
            neg |= v < 0.0;
        }
        if !(pos && neg) {
            return Err(Error::Infeasible { pattern: None });
        }
    }
    // rescale each U component; the constraint set is unchanged
    for q in 0..p {
        let rms = (u.iter().skip(q).step_by(p).map(|v| v * v).sum::<f64>() / n1 as f64).sqrt();
        if rms > 0.0 {
            for v in u.iter_mut().skip(q).step_by(p) {
                *v /= rms;
            }
        }
    }
    let n0 = (n - n1) as f64;
    Ok(Profile {
        masses: opts.masses,
        z,
        k,
        u,
        p,
        eps: 1.0 / units.len() as f64,
        responded,
        bbar,
        c: n0 / n1 as f64,
        frac: n1 as f64 / n as f64,
        max_inner: opts.max_inner,
    })
}

/// `min_lambda h(theta, lambda)` by Newton started at the calibration
/// solution, with the Hessian taken from central differences of the
/// envelope gradient.
fn profile_min(profile: &Profile, start: &[f64], opts: &ElOptions) -> Result<f64> {
    let k = profile.k;
    let m = profile.m();
    let mut lambda = DVector::from_column_slice(start);
    let mut cur = profile.eval(lambda.as_slice(), &DVector::zeros(m))?;
    for _ in 0..opts.max_outer {
        if cur.grad.amax() <= opts.grad_tol {
            break;
        }
        let mut hess = DMatrix::zeros(k, k);
        for a in 0..k {
            let h = 1e-5;
            let mut lp = lambda.clone();
            let mut lm = lambda.clone();
            lp[a] += h;
            lm[a] -= h;
            let gp = profile.eval(lp.as_slice(), &cur.eta)?.grad;
            let gm = profile.eval(lm.as_slice(), &cur.eta)?.grad;
            hess.set_column(a, &((gp - gm) / (2.0 * h)));
        }
        linalg::symmetrize(&mut hess);
        // shift towards the gradient direction until the model is convex
        let scale = hess.diagonal().amax().max(1e-12);
        let mut shift = 0.0;
        let mut dir = loop {
            let mut hs = hess.clone();
            for a in 0..k {
                hs[(a, a)] += shift;
            }
            if let Some(ch) = hs.cholesky() {
                break -ch.solve(&cur.grad);
            }
            shift = if shift == 0.0 { 1e-8 * scale } else { shift * 10.0 };
        };
        let cap = dir.amax();
        if cap > 1.0 {
            dir /= cap;
        }
        let slope = dir.dot(&cur.grad);
        let floor = 1e-13 * (1.0 + cur.h.abs());
        let gnorm = cur.grad.amax();
        let mut t = 1.0;
        let mut next = None;
        while t > 1e-10 {
            let trial = &lambda + &dir * t;
            if let Ok(ev) = profile.eval(trial.as_slice(), &cur.eta) {
                let decrease = ev.h <= cur.h + 1e-4 * t * slope;
                // below roundoff in h, progress is judged on the gradient
                let flat = ev.h <= cur.h + floor && ev.grad.amax() < gnorm;
                if decrease || flat {
                    next = Some((trial, ev));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((trial, ev)) = next else {
            if gnorm <= 1e-5 {
                break;
            }
            return Err(Error::NoConvergence(format!(
                "profile likelihood stalled with gradient {gnorm:e}"
            )));
        };
        lambda = trial;
        cur = ev;
        if lambda.amax() > 50.0 {
            return Err(Error::Infeasible { pattern: None });
        }
    }
    if cur.min_w < profile.eps {
        return Err(Error::Infeasible { pattern: None });
    }
    Ok(cur.h.max(0.0))
}

/// Profile empirical log-likelihood `l_p(theta)`.
pub fn el_profile_loglik(
    sample: &Sample,
    design: &BalancingDesign,
    estfun: &dyn EstimatingFunction,
    theta: &[f64],
    opts: &ElOptions,
) -> Result<f64> {
    let (params, _) = calibrate(sample, design, &opts.estimator.calibration)?;
    let profile = build_profile(sample, design, &params, estfun, theta, opts)?;
    let h = profile_min(&profile, &params.lambda_std, opts)?;
    let n = profile.n() as f64;
    Ok(-n * n.ln() - h)
}

/// Ratio test of `theta = theta0` against the two-step estimate, referred
/// to a chi-squared distribution with `p` degrees of freedom.
pub fn el_ratio_test(
    sample: &Sample,
    design: &BalancingDesign,
    estfun: &dyn EstimatingFunction,
    theta0: &[f64],
    opts: &ElOptions,
) -> Result<ElTest> {
    let p = estfun.dim();
    if theta0.len() != p {
        return Err(Error::DimensionMismatch(format!("theta0 has length {}, expected {p}", theta0.len())));
    }
    let (params, w) = calibrate(sample, design, &opts.estimator.calibration)?;
    let fit = sps_from_weights(sample, &params, &w, estfun, &opts.estimator)?;
    let at_hat = build_profile(sample, design, &params, estfun, &fit.theta, opts)
        .and_then(|pr| profile_min(&pr, &params.lambda_std, opts))?;
    let at_null = build_profile(sample, design, &params, estfun, theta0, opts)
        .and_then(|pr| profile_min(&pr, &params.lambda_std, opts));
    let chi = ChiSquared::new(p as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    match at_null {
        Ok(h0) => {
            let stat = (2.0 * (h0 - at_hat)).max(0.0);
            Ok(ElTest {
                statistic: Some(stat),
                p_value: chi.sf(stat),
                df: p,
                theta_hat: fit.theta,
                theta0: theta0.to_vec(),
                feasible: true,
            })
        }
        Err(Error::Infeasible { .. }) => Ok(ElTest {
            statistic: None,
            p_value: 0.0,
            df: p,
            theta_hat: fit.theta,
            theta0: theta0.to_vec(),
            feasible: false,
        }),
        Err(e) => Err(e),
    }
}
