//! Kernel sufficient dimension reduction: find `W` (`l x d`, orthonormal
//! rows) minimizing the trace of the empirical conditional covariance
//! operator of `y` given `W x`.
//!
//! With centered Gram matrices `G_Y` and `G_W` and ridge `c = N eps`, the
//! objective is `c Tr[G_Y (G_W + c I)^{-1}]`. Both Gram matrices are
//! replaced by pivoted incomplete Cholesky factors, which turns every solve
//! into a small dense one.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdrOptions {
    /// Ridge parameter; the regularization is `N eps`.
    pub eps: f64,
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop when the projected gradient norm is below `grad_tol * max(1, objective)`.
    pub grad_tol: f64,
    pub seed: u64,
    /// Incomplete Cholesky stops when the residual trace is below `chol_tol * N`.
    pub chol_tol: f64,
    pub max_rank: usize,
}

impl Default for SdrOptions {
    fn default() -> Self {
        SdrOptions {
            eps: 1e-3,
            restarts: 5,
            max_iter: 200,
            grad_tol: 1e-5,
            seed: 0,
            chol_tol: 1e-12,
            max_rank: 400,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdrProjection {
    /// Rows of `W`, each of length `d`.
    pub w: Vec<Vec<f64>>,
    pub objective: f64,
    /// Objective at every accepted iterate of the winning restart.
    pub trace: Vec<f64>,
    pub sigma_y: f64,
    pub sigma_w: f64,
    pub eps: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl SdrProjection {
    pub fn w_matrix(&self) -> DMatrix<f64> {
        let l = self.w.len();
        let d = self.w.first().map_or(0, Vec::len);
        DMatrix::from_fn(l, d, |i, j| self.w[i][j])
    }
}

/// Pivoted incomplete Cholesky of a unit-diagonal kernel matrix; returns
/// the `n x r` factor with centered columns.
fn centered_factor(n: usize, kernel: impl Fn(usize, usize) -> f64, tol: f64, max_rank: usize) -> DMatrix<f64> {
    let mut diag = vec![1.0; n];
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut used = vec![false; n];
    while cols.len() < max_rank.min(n) {
        let rest: f64 = diag.iter().zip(&used).filter(|(_, &u)| !u).map(|(d, _)| d).sum();
        if rest <= tol {
            break;
        }
        let (piv, &dp) = diag
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .unwrap();
        if dp <= 0.0 {
            break;
        }
        used[piv] = true;
        let root = dp.sqrt();
        let mut g = vec![0.0; n];
        // rows of earlier pivots are reproduced exactly and stay zero
        for i in 0..n {
            if used[i] && i != piv {
                continue;
            }
            let mut v = kernel(i, piv);
            for c in &cols {
                v -= c[i] * c[piv];
            }
            g[i] = v / root;
        }
        for i in 0..n {
            if !used[i] {
                diag[i] -= g[i] * g[i];
            }
        }
        diag[piv] = 0.0;
        cols.push(g);
    }
    let r = cols.len();
    let mut p = DMatrix::from_fn(n, r, |i, j| cols[j][i]);
    for mut col in p.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    p
}

/// Median pairwise distance among rows of `t` and the pair attaining it.
fn median_distance(t: &DMatrix<f64>) -> (f64, usize, usize) {
    let n = t.nrows();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for c in 0..t.ncols() {
                let v = t[(i, c)] - t[(j, c)];
                s += v * v;
            }
            pairs.push((s.sqrt(), i, j));
        }
    }
    let mid = pairs.len() / 2;
    let (_, m, _) = pairs.select_nth_unstable_by(mid, |a, b| {
        a.0.partial_cmp(&b.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2)))
    });
    *m
}

fn gauss(t: &DMatrix<f64>, i: usize, j: usize, sigma: f64) -> f64 {
    let mut s = 0.0;
    for c in 0..t.ncols() {
        let v = t[(i, c)] - t[(j, c)];
        s += v * v;
    }
    (-s / (2.0 * sigma * sigma)).exp()
}

struct SdrData {
    x: DMatrix<f64>,
    py: DMatrix<f64>,
    tr_yy: f64,
    sigma_y: f64,
    c: f64,
    chol_tol: f64,
    max_rank: usize,
}

struct Evaluation {
    f: f64,
    sigma: f64,
    pair: (usize, usize),
    t: DMatrix<f64>,
    pw: DMatrix<f64>,
    /// `(Pw' Pw + c I)^{-1} Pw' Py`.
    coef: DMatrix<f64>,
}

impl SdrData {
    fn new(x: DMatrix<f64>, y: &[f64], opts: &SdrOptions) -> Result<Self> {
        let n = x.nrows();
        if n < 3 {
            return Err(Error::InvalidArgument("kernel dimension reduction needs at least 3 points".into()));
        }
        let ym = DMatrix::from_column_slice(n, 1, y);
        let (sigma_y, _, _) = median_distance(&ym);
        if !(sigma_y > 0.0) {
            return Err(Error::InvalidArgument("outcome has zero median pairwise distance".into()));
        }
        let tol = opts.chol_tol * n as f64;
        let py = centered_factor(n, |i, j| gauss(&ym, i, j, sigma_y), tol, opts.max_rank);
        let tr_yy = py.norm_squared();
        Ok(SdrData {
            x,
            py,
            tr_yy,
            sigma_y,
            c: n as f64 * opts.eps,
            chol_tol: tol,
            max_rank: opts.max_rank,
        })
    }

    fn evaluate(&self, w: &DMatrix<f64>) -> Result<Evaluation> {
        let t = &self.x * w.transpose();
        let (sigma, i, j) = median_distance(&t);
        if !(sigma > 0.0) {
            return Err(Error::NoConvergence("projected covariates collapsed".into()));
        }
        let n = self.x.nrows();
        let pw = centered_factor(n, |a, b| gauss(&t, a, b, sigma), self.chol_tol, self.max_rank);
        let r = pw.ncols();
        let mut gram = pw.transpose() * &pw;
        for a in 0..r {
            gram[(a, a)] += self.c;
        }
        let cross = pw.transpose() * &self.py;
        let coef = linalg::solve_spd_matrix(&gram, &cross).ok_or(Error::SingularJacobian)?;
        let f = self.tr_yy - cross.component_mul(&coef).sum();
        Ok(Evaluation {
            f,
            sigma,
            pair: (i, j),
            t,
            pw,
            coef,
        })
    }

    /// Euclidean gradient of the objective with respect to `W`.
    fn gradient(&self, w: &DMatrix<f64>, ev: &Evaluation) -> DMatrix<f64> {
        let n = self.x.nrows();
        let d = self.x.ncols();
        // B = H (G_W + cI)^{-1} Py
        let mut b = (&self.py - &ev.pw * &ev.coef) / self.c;
        for mut col in b.column_iter_mut() {
            let m = col.mean();
            col.add_scalar_mut(-m);
        }
        let bt = b.transpose();
        let mut rowsum = vec![0.0; n];
        let mut cx = DMatrix::zeros(n, d);
        for i in 0..n {
            let bi = bt.column(i);
            for j in (i + 1)..n {
                let kij = gauss(&ev.t, i, j, ev.sigma);
                let cij = -self.c * bi.dot(&bt.column(j)) * kij;
                rowsum[i] += cij;
                rowsum[j] += cij;
                for q in 0..d {
                    cx[(i, q)] += cij * self.x[(j, q)];
                    cx[(j, q)] += cij * self.x[(i, q)];
                }
            }
            let cii = -self.c * bi.dot(&bi);
            rowsum[i] += cii;
            for q in 0..d {
                cx[(i, q)] += cii * self.x[(i, q)];
            }
        }
        let mut xdx = DMatrix::zeros(d, d);
        for i in 0..n {
            let xi = self.x.row(i);
            xdx += xi.transpose() * xi * rowsum[i];
        }
        let s = (xdx - self.x.transpose() * cx) * 2.0;
        let ws = w * &s;
        let sig = ev.sigma;
        let mut g = -&ws / (sig * sig);
        let (i, j) = ev.pair;
        let delta = (self.x.row(i) - self.x.row(j)).transpose();
        let wd = w * &delta;
        let dsigma = &wd * delta.transpose() / wd.norm();
        g += dsigma * ((ws * w.transpose()).trace() / (sig * sig * sig));
        g
    }
}

/// Objective value for a given `W` (`l x d`, orthonormal rows).
pub fn sdr_objective(x: &DMatrix<f64>, y: &[f64], w: &DMatrix<f64>, opts: &SdrOptions) -> Result<f64> {
    if w.ncols() != x.ncols() || y.len() != x.nrows() {
        return Err(Error::DimensionMismatch("sdr inputs".into()));
    }
    let data = SdrData::new(x.clone(), y, opts)?;
    Ok(data.evaluate(w)?.f)
}

struct Run {
    w: DMatrix<f64>,
    f: f64,
    sigma: f64,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn optimize(data: &SdrData, w0: DMatrix<f64>, opts: &SdrOptions) -> Result<Run> {
    let d = w0.ncols();
    let mut w = w0;
    let mut ev = data.evaluate(&w)?;
    let mut trace = vec![ev.f];
    let mut prev: Option<(DMatrix<f64>, DMatrix<f64>)> = None;
    let mut step = f64::NAN;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..opts.max_iter {
        iterations = it;
        let proj = DMatrix::identity(d, d) - w.transpose() * &w;
        let g = data.gradient(&w, &ev) * proj;
        let gn = g.norm();
        if gn <= opts.grad_tol * ev.f.abs().max(1.0) {
            converged = true;
            break;
        }
        // Barzilai-Borwein initial step, backtracked to an Armijo decrease
        if let Some((pw, pg)) = &prev {
            let s = &w - pw;
            let yv = &g - pg;
            let sy = s.dot(&yv);
            if sy > 0.0 {
                step = s.norm_squared() / sy;
            }
        }
        if !(step.is_finite() && step > 0.0) {
            step = 0.1 / gn;
        }
        let mut t = step;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = linalg::orthonormalize_rows(&(&w - &g * t));
            if let Ok(tev) = data.evaluate(&trial) {
                if tev.f <= ev.f - 1e-4 * t * gn * gn {
                    accepted = Some((trial, tev));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((trial, tev)) = accepted else { break };
        step = t;
        prev = Some((w, g));
        w = trial;
        ev = tev;
        trace.push(ev.f);
        iterations = it + 1;
    }
    Ok(Run {
        w,
        f: ev.f,
        sigma: ev.sigma,
        trace,
        iterations,
        converged,
    })
}

/// Kernel dimension reduction on the respondents of `sample` with target
/// dimension `l`; the best of `opts.restarts` random starts is returned.
pub fn kernel_sdr(sample: &Sample, l: usize, opts: &SdrOptions) -> Result<SdrProjection> {
    let resp = sample.respondents();
    let d = sample.d();
    let x = DMatrix::from_fn(resp.len(), d, |r, j| sample.x_row(resp[r])[j]);
    let y: Vec<f64> = resp.iter().map(|&i| sample.y(i).unwrap()).collect();
    kernel_sdr_xy(&x, &y, l, opts)
}

/// Kernel dimension reduction on explicit data.
pub fn kernel_sdr_xy(x: &DMatrix<f64>, y: &[f64], l: usize, opts: &SdrOptions) -> Result<SdrProjection> {
    let d = x.ncols();
    if l == 0 || l > d {
        return Err(Error::InvalidArgument(format!("target dimension {l} must be in 1..={d}")));
    }
    let data = SdrData::new(x.clone(), y, opts)?;
    let runs: Vec<Result<Run>> = if l == d {
        let w = DMatrix::identity(d, d);
        vec![data.evaluate(&w).map(|ev| Run {
            w,
            f: ev.f,
            sigma: ev.sigma,
            trace: vec![ev.f],
            iterations: 0,
            converged: true,
        })]
    } else {
        (0..opts.restarts.max(1))
            .into_par_iter()
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                rng.set_stream(r as u64);
                let w0 = DMatrix::from_fn(l, d, |_, _| rng.sample::<f64, _>(StandardNormal));
                optimize(&data, linalg::orthonormalize_rows(&w0), opts)
            })
            .collect()
    };
    let mut best: Option<Run> = None;
    let mut last_err = None;
    for run in runs {
        match run {
            Ok(r) => {
                if best.as_ref().is_none_or(|b| r.f < b.f) {
                    best = Some(r);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let best = best.ok_or_else(|| last_err.unwrap_or(Error::NoConvergence("no restart succeeded".into())))?;
    if !best.converged {
        log::warn!("kernel dimension reduction stopped before the gradient tolerance was met");
    }
    Ok(SdrProjection {
        w: (0..l).map(|i| best.w.row(i).iter().cloned().collect()).collect(),
        objective: best.f,
        trace: best.trace,
        sigma_y: data.sigma_y,
        sigma_w: best.sigma,
        eps: opts.eps,
        iterations: best.iterations,
        converged: best.converged,
    })
}
