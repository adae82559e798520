//! Linearization variance for the smoothed propensity-score estimator.

use nalgebra::{DMatrix, DVector};

use crate::calibration::{smoothed_weights, TiltingParams};
use crate::data::{design_matrix, BalancingDesign, EstimatingFunction, Sample};
use crate::error::{Error, Result};
use crate::estimators::tilt_regression;
use crate::linalg;

/// Influence values and the pieces used to build them.
#[derive(Clone, Debug)]
pub struct InfluenceDecomposition {
    /// `n x p` matrix of influence values `d_i`.
    pub d: DMatrix<f64>,
    /// `(L+1) x p` coefficients of the density-ratio weighted regression of `U` on `z`.
    pub beta: DMatrix<f64>,
    /// `p x p` estimate of `E{dU/dtheta'}`.
    pub tau: DMatrix<f64>,
}

impl InfluenceDecomposition {
    /// `N^{-1} tau^{-1} S_dd tau^{-T}` with `S_dd` the sample covariance of `d`.
    pub fn variance(&self) -> Result<DMatrix<f64>> {
        let n = self.d.nrows() as f64;
        let sigma = linalg::sample_covariance(&self.d);
        linalg::sandwich(&self.tau, &sigma, n).ok_or(Error::SingularTau)
    }
}

/// `d_i = beta' z_i + delta_i w_i (U_i - beta' z_i)` for every unit, where
/// `beta` fits `U` on `z` over respondents weighted by the fitted density ratio.
pub fn influence_decomposition(
    sample: &Sample,
    design: &BalancingDesign,
    params: &TiltingParams,
    theta_hat: &[f64],
    estfun: &dyn EstimatingFunction,
) -> Result<InfluenceDecomposition> {
    let w = smoothed_weights(sample, design, params)?;
    let zm = design_matrix(sample, design, false)?;
    let n = sample.n();
    let k = zm.ncols();
    let p = estfun.dim();
    let resp = &w.respondents;

    let mut zr = Vec::with_capacity(resp.len() * k);
    for &i in resp {
        zr.extend(zm.row(i).iter());
    }
    let mut u = DMatrix::zeros(resp.len(), p);
    let mut tau = DMatrix::zeros(p, p);
    for (r, &i) in resp.iter().enumerate() {
        let x = sample.x_row(i);
        let y = [sample.y(i).unwrap()];
        u.set_row(r, &estfun.eval(theta_hat, x, &y).transpose());
        tau += estfun.jacobian(theta_hat, x, &y) * w.omega[r];
    }
    tau /= n as f64;

    let mut beta = DMatrix::zeros(k, p);
    for q in 0..p {
        let col: Vec<f64> = u.column(q).iter().cloned().collect();
        beta.set_column(q, &tilt_regression(&zr, k, &w.ratio, &col)?);
    }

    let mut d = &zm * &beta;
    for (r, &i) in resp.iter().enumerate() {
        let fit: DVector<f64> = d.row(i).transpose();
        let ui: DVector<f64> = u.row(r).transpose();
        let di = &fit + (&ui - &fit) * w.omega[r];
        d.set_row(i, &di.transpose());
    }
    Ok(InfluenceDecomposition { d, beta, tau })
}

/// Linearization variance of the smoothed propensity-score estimate.
pub fn linearized_variance(
    sample: &Sample,
    design: &BalancingDesign,
    params: &TiltingParams,
    theta_hat: &[f64],
    estfun: &dyn EstimatingFunction,
) -> Result<DMatrix<f64>> {
    influence_decomposition(sample, design, params, theta_hat, estfun)?.variance()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::calibrate;
    use crate::data::Mean;
    use crate::estimators::{sps_estimate, EstimatorOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_sample(seed: u64, n: usize) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let x: Vec<f64> = (0..2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let p = 1.0 / (1.0 + (-(0.5 + 0.5 * x[0])).exp());
            let yi = 1.0 + x[0] - x[1] + rng.sample::<f64, _>(StandardNormal);
            y.push(if rng.random::<f64>() < p { Some(yi) } else { None });
            rows.push(x);
        }
        Sample::from_rows(&rows, y).unwrap()
    }

    fn fit_var(s: &Sample) -> (f64, DMatrix<f64>) {
        let d = BalancingDesign::identity(s.d());
        let (p, _) = calibrate(s, &d, &Default::default()).unwrap();
        let r = sps_estimate(s, &d, &Mean::scalar(), &EstimatorOptions::default()).unwrap();
        (r.theta[0], linearized_variance(s, &d, &p, &r.theta, &Mean::scalar()).unwrap())
    }

    #[test]
    fn full_response_gives_variance_of_mean() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let ys = [1.0, 4.0, 2.0, 8.0, 5.0, 4.0];
        let s = Sample::from_rows(&rows, ys.iter().map(|&v| Some(v)).collect()).unwrap();
        let (theta, v) = fit_var(&s);
        let var = ys.iter().map(|y| (y - theta).powi(2)).sum::<f64>() / 5.0;
        assert!((v[(0, 0)] - var / 6.0).abs() < 1e-12);
    }

    #[test]
    fn constant_outcome_has_zero_variance() {
        let s = random_sample(1, 300).map_outcome(|_| 3.0);
        let (_, v) = fit_var(&s);
        assert!(v[(0, 0)].abs() < 1e-20);
    }

    #[test]
    fn influence_mean_matches_equation_residual() {
        let s = random_sample(2, 500);
        let d = BalancingDesign::identity(2);
        let (p, _) = calibrate(&s, &d, &Default::default()).unwrap();
        let r = sps_estimate(&s, &d, &Mean::scalar(), &EstimatorOptions::default()).unwrap();
        let inf = influence_decomposition(&s, &d, &p, &r.theta, &Mean::scalar()).unwrap();
        assert!(inf.d.column(0).mean().abs() < 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn se_is_location_invariant_and_scale_equivariant(seed in 0u64..5000, a in -3.0f64..3.0, b in -10.0f64..10.0) {
            prop_assume!(a.abs() > 0.1);
            let s = random_sample(seed, 300);
            let (_, v0) = fit_var(&s);
            let (_, v1) = fit_var(&s.map_outcome(|y| a * y + b));
            let se0 = v0[(0, 0)].sqrt();
            let se1 = v1[(0, 0)].sqrt();
            prop_assert!((se1 - a.abs() * se0).abs() <= 1e-8 * (1.0 + se1));
        }

        #[test]
        fn variance_is_permutation_invariant(seed in 0u64..5000) {
            let s = random_sample(seed, 200);
            let perm: Vec<usize> = (0..s.n()).rev().collect();
            let (_, v0) = fit_var(&s);
            let (_, v1) = fit_var(&s.subset(&perm).unwrap());
            prop_assert!((v0[(0, 0)] - v1[(0, 0)]).abs() <= 1e-9 * v0[(0, 0)]);
            prop_assert!(v0[(0, 0)] >= 0.0);
        }
    }
}
