//! Nonparametric bootstrap over units.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{BalancingDesign, EstimatingFunction, Sample};
use crate::error::{Error, Result};
use crate::estimators::{sps_estimate, EstimatorOptions};
use crate::linalg;

/// Largest tolerated share of failed replicates.
pub const MAX_FAILURE_RATE: f64 = 0.10;

#[derive(Clone, Debug)]
pub struct BootstrapResult {
    /// Covariance of the successful replicate estimates (divisor `B - 1`).
    pub cov: DMatrix<f64>,
    /// Replicate estimates in replicate order, `None` for failures.
    pub replicates: Vec<Option<Vec<f64>>>,
    pub failed: usize,
}

/// Generator for replicate `index`: one seed, one stream per replicate, so
/// results do not depend on scheduling.
pub fn replicate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Bootstrap an arbitrary estimator. Replicates whose fit fails with a
/// numerical or data error are dropped and counted.
pub fn bootstrap_with<F>(sample: &Sample, b: usize, seed: u64, fit: F) -> Result<BootstrapResult>
where
    F: Fn(&Sample) -> Result<Vec<f64>> + Sync,
{
    if b < 2 {
        return Err(Error::InvalidArgument(format!("bootstrap needs at least 2 replicates, got {b}")));
    }
    let n = sample.n();
    let replicates: Vec<Option<Vec<f64>>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(seed, r as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            match sample.subset(&idx).and_then(|s| fit(&s)) {
                Ok(theta) => Some(theta),
                Err(e) => {
                    log::debug!("bootstrap replicate {r} failed: {e}");
                    None
                }
            }
        })
        .collect();
    let failed = replicates.iter().filter(|r| r.is_none()).count();
    if failed as f64 > MAX_FAILURE_RATE * b as f64 {
        return Err(Error::TooManyFailures { failed, total: b });
    }
    if failed > 0 {
        log::warn!("{failed} of {b} bootstrap replicates failed and were dropped");
    }
    let ok: Vec<&Vec<f64>> = replicates.iter().flatten().collect();
    let p = ok.first().map_or(0, |t| t.len());
    let m = DMatrix::from_fn(ok.len(), p, |i, j| ok[i][j]);
    Ok(BootstrapResult {
        cov: linalg::sample_covariance(&m),
        replicates,
        failed,
    })
}

/// Bootstrap covariance of the smoothed propensity-score estimate; each
/// replicate refits the tilting parameters and `theta`.
pub fn bootstrap_variance(
    sample: &Sample,
    design: &BalancingDesign,
    estfun: &dyn EstimatingFunction,
    opts: &EstimatorOptions,
    b: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    bootstrap_with(sample, b, seed, |s| sps_estimate(s, design, estfun, opts).map(|r| r.theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Mean;

    fn small_sample() -> Sample {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![(i % 7) as f64]).collect();
        let y = (0..30).map(|i| if i % 3 == 0 { None } else { Some((i % 5) as f64) }).collect();
        Sample::from_rows(&rows, y).unwrap()
    }

    #[test]
    fn constant_outcome_has_zero_variance() {
        let s = small_sample().map_outcome(|_| 2.0);
        let r = bootstrap_variance(&s, &BalancingDesign::identity(1), &Mean::scalar(), &Default::default(), 50, 1).unwrap();
        assert!(r.cov[(0, 0)].abs() < 1e-20);
    }

    #[test]
    fn two_replicates_use_two_point_formula() {
        let s = small_sample();
        let r = bootstrap_with(&s, 2, 9, |s| Ok(vec![s.x_row(0)[0] + s.n() as f64])).unwrap();
        let a = r.replicates[0].as_ref().unwrap()[0];
        let b = r.replicates[1].as_ref().unwrap()[0];
        assert!((r.cov[(0, 0)] - (a - b).powi(2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let s = small_sample();
        let d = BalancingDesign::identity(1);
        let a = bootstrap_variance(&s, &d, &Mean::scalar(), &Default::default(), 40, 5).unwrap();
        let b = bootstrap_variance(&s, &d, &Mean::scalar(), &Default::default(), 40, 5).unwrap();
        assert_eq!(a.replicates, b.replicates);
        assert_eq!(a.cov[(0, 0)].to_bits(), b.cov[(0, 0)].to_bits());
    }

    #[test]
    fn too_many_failures_is_an_error() {
        let s = small_sample();
        let r = bootstrap_with(&s, 20, 1, |s| {
            if s.x_row(0)[0] < 4.0 {
                Err(Error::Infeasible { pattern: None })
            } else {
                Ok(vec![1.0])
            }
        });
        assert!(matches!(r, Err(Error::TooManyFailures { .. })));
    }
}
