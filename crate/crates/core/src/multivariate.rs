//! Arbitrary missingness patterns over several outcomes.
//!
//! Units are grouped by which outcomes they report. Every incomplete pattern
//! `t` gets its own log-linear density ratio against the complete cases,
//! fitted on the variables observed in that pattern, and the complete cases
//! are weighted by `1 + sum_t (N_t / N_1) r_t`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{solve_tilt, CalibrationOptions, TiltProblem, TiltingParams};
use crate::data::{check_full_rank, BalancingDesign, EstimatingFunction, MultiSample};
use crate::error::{Error, Result};
use crate::estimators::{solve_weighted, Diagnostics, EstimateResult, EstimatorOptions, Method, WeightedUnit};
use crate::linalg;

/// Disjoint groups of units sharing the same set of observed outcomes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternPartition {
    /// Observed-outcome bitmask of each pattern (bit `k` set when `Y_{k+1}`
    /// is observed). Pattern 0 is the complete pattern.
    pub patterns: Vec<u64>,
    /// Pattern index of every unit.
    pub membership: Vec<usize>,
    pub counts: Vec<usize>,
}

impl PatternPartition {
    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    /// Units of pattern `t` in increasing order.
    pub fn members(&self, t: usize) -> Vec<usize> {
        (0..self.membership.len()).filter(|&i| self.membership[i] == t).collect()
    }

    /// Bitmask to count, for reporting.
    pub fn report(&self) -> BTreeMap<u64, usize> {
        self.patterns.iter().cloned().zip(self.counts.iter().cloned()).collect()
    }

    /// Reorder patterns `1..T` by `order`, which must be a permutation of
    /// `1..T`. Pattern 0 stays first.
    pub fn relabel(&self, order: &[usize]) -> Result<Self> {
        let t = self.len();
        let mut seen = vec![false; t];
        if order.len() + 1 != t || order.iter().any(|&o| o == 0 || o >= t || std::mem::replace(&mut seen[o], true)) {
            return Err(Error::InvalidArgument("pattern order must permute 1..T".into()));
        }
        let mut new_index = vec![0usize; t];
        for (pos, &old) in order.iter().enumerate() {
            new_index[old] = pos + 1;
        }
        let mut patterns = vec![self.patterns[0]];
        let mut counts = vec![self.counts[0]];
        for &old in order {
            patterns.push(self.patterns[old]);
            counts.push(self.counts[old]);
        }
        Ok(PatternPartition {
            patterns,
            membership: self.membership.iter().map(|&m| new_index[m]).collect(),
            counts,
        })
    }
}

/// Group units by observed-outcome pattern: the complete pattern first, the
/// rest by decreasing count (ties by increasing bitmask).
pub fn partition_patterns(ms: &MultiSample) -> Result<PatternPartition> {
    let full = (1u64 << ms.p()) - 1;
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for i in 0..ms.n() {
        *counts.entry(ms.observed_mask(i)).or_default() += 1;
    }
    if !counts.contains_key(&full) {
        return Err(Error::NoCompleteCases);
    }
    let mut rest: Vec<(u64, usize)> = counts.iter().filter(|(m, _)| **m != full).map(|(m, c)| (*m, *c)).collect();
    rest.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut patterns = vec![full];
    patterns.extend(rest.iter().map(|(m, _)| *m));
    let index: BTreeMap<u64, usize> = patterns.iter().enumerate().map(|(t, m)| (*m, t)).collect();
    Ok(PatternPartition {
        counts: patterns.iter().map(|m| counts[m]).collect(),
        membership: (0..ms.n()).map(|i| index[&ms.observed_mask(i)]).collect(),
        patterns,
    })
}

/// Joint `(x, y)` row with unobserved outcomes set to zero, so designs that
/// ignore them evaluate to finite values.
fn design_row(ms: &MultiSample, i: usize) -> Vec<f64> {
    let mut v = ms.x_row(i).to_vec();
    v.extend((0..ms.p()).map(|k| ms.y_cell(i, k).unwrap_or(0.0)));
    v
}

/// Linear design on the covariates (when `include_x`) and the outcomes
/// observed under `mask`, indexed into the joint `(x, y)` row.
pub fn default_pattern_design(ms: &MultiSample, mask: u64, include_x: bool) -> BalancingDesign {
    let d = ms.d();
    let mut cols: Vec<usize> = if include_x { (0..d).collect() } else { Vec::new() };
    cols.extend((0..ms.p()).filter(|k| mask >> k & 1 == 1).map(|k| d + k));
    BalancingDesign::linear(&cols)
}

/// Check that `design` only reads covariates and outcomes observed under `mask`.
fn check_pattern_design(ms: &MultiSample, mask: u64, design: &BalancingDesign) -> Result<()> {
    design.check_dimension(ms.d() + ms.p())?;
    for b in &design.basis {
        for j in b.columns() {
            if j >= ms.d() && mask >> (j - ms.d()) & 1 == 0 {
                return Err(Error::InvalidArgument(format!(
                    "design for pattern {mask:#b} reads unobserved outcome {}",
                    j - ms.d() + 1
                )));
            }
        }
    }
    Ok(())
}

/// Settings for the multivariate estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MvOptions {
    pub estimator: EstimatorOptions,
    /// Include the covariates in the default pattern designs.
    pub include_x: bool,
    /// Designs keyed by pattern bitmask; other patterns use the default.
    pub designs: BTreeMap<u64, BalancingDesign>,
}

impl Default for MvOptions {
    fn default() -> Self {
        MvOptions {
            estimator: EstimatorOptions::default(),
            include_x: true,
            designs: BTreeMap::new(),
        }
    }
}

/// Fitted density ratio of one (possibly merged) incomplete pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternFit {
    /// Index into the partition.
    pub pattern: usize,
    pub mask: u64,
    /// Bitmasks of smaller patterns folded into this one.
    pub merged: Vec<u64>,
    /// Units whose totals are matched, in increasing order.
    pub members: Vec<usize>,
    /// `N_t / N_1`.
    pub c: f64,
    /// Parameters; the design indexes the joint `(x, y)` row.
    pub params: TiltingParams,
    /// Fitted ratio at each complete case.
    pub ratio: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternTilting {
    /// Complete cases in increasing order.
    pub complete: Vec<usize>,
    pub fits: Vec<PatternFit>,
}

impl PatternTilting {
    /// `1 + sum_t c_t r_t` at each complete case.
    pub fn weights(&self) -> Vec<f64> {
        let mut w = vec![1.0; self.complete.len()];
        for f in &self.fits {
            for (wi, r) in w.iter_mut().zip(&f.ratio) {
                *wi += f.c * r;
            }
        }
        w
    }

    /// Largest per-pattern balancing residual.
    pub fn max_residual(&self) -> f64 {
        self.fits.iter().map(|f| f.params.residual).fold(0.0, f64::max)
    }

    pub fn iterations(&self) -> usize {
        self.fits.iter().map(|f| f.params.iterations).sum()
    }
}

struct Group {
    pattern: usize,
    mask: u64,
    merged: Vec<u64>,
    members: Vec<usize>,
    design: BalancingDesign,
}

/// Fold patterns too small for their design (`N_t < L(t) + 2`) into the
/// nearest coarser pattern; without one the design is cut back to the
/// covariates, then to the intercept.
fn plan_groups(ms: &MultiSample, partition: &PatternPartition, opts: &MvOptions) -> Result<Vec<Group>> {
    let mut groups: Vec<Group> = Vec::new();
    for t in 1..partition.len() {
        let mask = partition.patterns[t];
        let design = match opts.designs.get(&mask) {
            Some(d) => {
                check_pattern_design(ms, mask, d)?;
                d.clone()
            }
            None => default_pattern_design(ms, mask, opts.include_x),
        };
        groups.push(Group {
            pattern: t,
            mask,
            merged: Vec::new(),
            members: partition.members(t),
            design,
        });
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        groups[b].mask.count_ones().cmp(&groups[a].mask.count_ones()).then(a.cmp(&b))
    });
    let mut alive = vec![true; groups.len()];
    for &g in &order {
        if groups[g].members.len() >= groups[g].design.len() + 2 {
            continue;
        }
        let mask = groups[g].mask;
        let target = (0..groups.len())
            .filter(|&h| alive[h] && h != g && groups[h].mask & !mask == 0 && groups[h].mask != mask)
            .max_by(|&a, &b| {
                groups[a]
                    .mask
                    .count_ones()
                    .cmp(&groups[b].mask.count_ones())
                    .then(groups[a].members.len().cmp(&groups[b].members.len()))
                    .then(b.cmp(&a))
            });
        match target {
            Some(h) => {
                log::warn!(
                    "pattern {mask:#b} has {} units; merged into pattern {:#b}",
                    groups[g].members.len(),
                    groups[h].mask
                );
                alive[g] = false;
                let moved = std::mem::take(&mut groups[g].members);
                let mut merged = std::mem::take(&mut groups[g].merged);
                merged.push(mask);
                groups[h].members.extend(moved);
                groups[h].members.sort_unstable();
                groups[h].merged.extend(merged);
            }
            None => {
                let x_only = if opts.include_x {
                    BalancingDesign::identity(ms.d())
                } else {
                    BalancingDesign::intercept_only()
                };
                groups[g].design = if groups[g].members.len() >= x_only.len() + 2 {
                    x_only
                } else {
                    BalancingDesign::intercept_only()
                };
                log::warn!(
                    "pattern {mask:#b} has {} units; outcome columns dropped from its design",
                    groups[g].members.len()
                );
            }
        }
    }
    Ok(groups.into_iter().zip(alive).filter(|(_, a)| *a).map(|(g, _)| g).collect())
}

fn fit_group(ms: &MultiSample, complete: &[usize], g: Group, opts: &CalibrationOptions) -> Result<PatternFit> {
    let k = g.design.len() + 1;
    let mut rows = Vec::with_capacity(complete.len() * k);
    let mut buf = vec![0.0; k - 1];
    for &i in complete {
        rows.push(1.0);
        g.design.eval_into(&design_row(ms, i), &mut buf);
        rows.extend_from_slice(&buf);
    }
    check_full_rank(&DMatrix::from_row_slice(complete.len(), k, &rows))?;
    let mut target = vec![0.0; k];
    for &i in &g.members {
        g.design.eval_into(&design_row(ms, i), &mut buf);
        target[0] += 1.0;
        for j in 0..k - 1 {
            target[j + 1] += buf[j];
        }
    }
    let c = g.members.len() as f64 / complete.len() as f64;
    let problem = TiltProblem::new(rows, k, target, c)?;
    let fit = solve_tilt(&problem, ms.n() as f64, opts, Some(g.pattern))?;
    let lambda = fit.standardization.to_original(&fit.lambda_std);
    Ok(PatternFit {
        pattern: g.pattern,
        mask: g.mask,
        merged: g.merged,
        members: g.members,
        c,
        params: TiltingParams {
            lambda0: lambda[0],
            lambda1: lambda[1..].to_vec(),
            lambda_std: fit.lambda_std,
            standardization: fit.standardization,
            design: g.design,
            c,
            iterations: fit.iterations,
            residual: fit.residual,
        },
        ratio: fit.e,
    })
}

/// Fit one density ratio per incomplete pattern. Patterns are solved
/// concurrently; results keep partition order.
pub fn solve_pattern_tilting(ms: &MultiSample, partition: &PatternPartition, opts: &MvOptions) -> Result<PatternTilting> {
    let complete = partition.members(0);
    let groups = plan_groups(ms, partition, opts)?;
    let cal = CalibrationOptions {
        start: None,
        c_override: None,
        ..opts.estimator.calibration.clone()
    };
    let fits = groups
        .into_par_iter()
        .map(|g| fit_group(ms, &complete, g, &cal))
        .collect::<Result<Vec<_>>>()?;
    Ok(PatternTilting { complete, fits })
}

/// Final weights over the complete cases.
pub fn mv_weights(tilting: &PatternTilting) -> Vec<f64> {
    tilting.weights()
}

/// Estimate together with the pattern structure behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvEstimate {
    pub partition: PatternPartition,
    pub tilting: PatternTilting,
    pub result: EstimateResult,
}

fn solve_on_complete(
    ms: &MultiSample,
    complete: &[usize],
    weights: &[f64],
    estfun: &dyn EstimatingFunction,
    n: f64,
    opts: &EstimatorOptions,
) -> Result<(Vec<f64>, usize)> {
    let ys: Vec<Vec<f64>> = complete.iter().map(|&i| ms.y_complete(i)).collect();
    let units: Vec<WeightedUnit> = complete
        .iter()
        .zip(&ys)
        .zip(weights)
        .map(|((&i, y), &w)| WeightedUnit { w, x: ms.x_row(i), y })
        .collect();
    solve_weighted(&units, estfun, n, opts.tol, opts.max_iter)
}

fn result(method: Method, ms: &MultiSample, n1: usize, theta: Vec<f64>, iters: (usize, usize), residual: f64, weights: Vec<f64>) -> EstimateResult {
    EstimateResult {
        method,
        theta,
        cov: None,
        se: None,
        diagnostics: Diagnostics {
            n: ms.n(),
            n_respondents: n1,
            weight_iterations: iters.0,
            theta_iterations: iters.1,
            balancing_residual: residual,
            min_weight: weights.iter().cloned().fold(f64::INFINITY, f64::min),
            max_weight: weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            converged: true,
            tau: None,
        },
        tilting: None,
        weights,
    }
}

/// Solve `N^{-1} sum_{complete} w_i U(theta; y_i) = 0` with pattern weights.
pub fn mv_sps_estimate(ms: &MultiSample, estfun: &dyn EstimatingFunction, opts: &MvOptions) -> Result<MvEstimate> {
    let partition = partition_patterns(ms)?;
    let tilting = solve_pattern_tilting(ms, &partition, opts)?;
    let weights = tilting.weights();
    let (theta, it) = solve_on_complete(ms, &tilting.complete, &weights, estfun, ms.n() as f64, &opts.estimator)?;
    let result = result(
        Method::Ip,
        ms,
        tilting.complete.len(),
        theta,
        (tilting.iterations(), it),
        tilting.max_residual(),
        weights,
    );
    Ok(MvEstimate {
        partition,
        tilting,
        result,
    })
}

/// Unweighted estimate on the complete cases.
pub fn complete_case_estimate(ms: &MultiSample, estfun: &dyn EstimatingFunction, opts: &EstimatorOptions) -> Result<EstimateResult> {
    let complete: Vec<usize> = (0..ms.n()).filter(|&i| ms.is_complete(i)).collect();
    let weights = vec![1.0; complete.len()];
    let (theta, it) = solve_on_complete(ms, &complete, &weights, estfun, complete.len() as f64, opts)?;
    Ok(result(Method::Ip, ms, complete.len(), theta, (0, it), 0.0, weights))
}

/// Linearization variance with influence values
/// `U_i + sum_t c_t r_t(z_i) (U_i - B_t z_i)` on complete cases and
/// `B_t z_i` on pattern `t`, where `B_t` regresses `U` on the pattern design
/// over complete cases weighted by `r_t`.
pub fn mv_linearized_variance(
    ms: &MultiSample,
    tilting: &PatternTilting,
    theta_hat: &[f64],
    estfun: &dyn EstimatingFunction,
) -> Result<DMatrix<f64>> {
    let n = ms.n();
    let p = estfun.dim();
    let complete = &tilting.complete;
    let w = tilting.weights();
    let mut u = DMatrix::zeros(complete.len(), p);
    let mut tau = DMatrix::zeros(p, p);
    for (r, &i) in complete.iter().enumerate() {
        let y = ms.y_complete(i);
        u.set_row(r, &estfun.eval(theta_hat, ms.x_row(i), &y).transpose());
        tau += estfun.jacobian(theta_hat, ms.x_row(i), &y) * w[r];
    }
    tau /= n as f64;

    let mut d = DMatrix::zeros(n, p);
    for (r, &i) in complete.iter().enumerate() {
        d.set_row(i, &u.row(r));
    }
    for f in &tilting.fits {
        let design = &f.params.design;
        let k = design.len() + 1;
        let zrow = |i: usize| -> DVector<f64> {
            let mut z = DVector::zeros(k);
            z[0] = 1.0;
            for (j, v) in design.eval(&design_row(ms, i)).into_iter().enumerate() {
                z[j + 1] = v;
            }
            z
        };
        let zc: Vec<DVector<f64>> = complete.iter().map(|&i| zrow(i)).collect();
        let flat: Vec<f64> = zc.iter().flat_map(|z| z.iter().cloned()).collect();
        let mut beta = DMatrix::zeros(k, p);
        for q in 0..p {
            let col: Vec<f64> = u.column(q).iter().cloned().collect();
            beta.set_column(q, &crate::estimators::tilt_regression(&flat, k, &f.ratio, &col)?);
        }
        for (r, &i) in complete.iter().enumerate() {
            let fit = beta.transpose() * &zc[r];
            let ui: DVector<f64> = u.row(r).transpose();
            let add = (ui - fit) * (f.c * f.ratio[r]);
            let cur: DVector<f64> = d.row(i).transpose() + add;
            d.set_row(i, &cur.transpose());
        }
        for &i in &f.members {
            let fit = beta.transpose() * zrow(i);
            d.set_row(i, &fit.transpose());
        }
    }
    let sigma = linalg::sample_covariance(&d);
    linalg::sandwich(&tau, &sigma, n as f64).ok_or(Error::SingularTau)
}
