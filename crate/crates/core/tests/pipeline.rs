use smoothps::calibration::{balancing_residual, calibrate};
use smoothps::data::{BalancingDesign, Indicator, Mean};
use smoothps::estimators::{regression_imputation_form, sps_estimate, EstimatorOptions};
use smoothps::inference::{el_ratio_test, linearized_variance, replicate_rng, ElOptions};
use smoothps::io::{load_csv, read_csv, ColumnRoles, Loaded};
use smoothps::multivariate::{mv_sps_estimate, MvOptions};
use smoothps::simulation::dgp::{self, OutcomeModel, ResponseModel};

fn roles(y: &str) -> ColumnRoles {
    ColumnRoles {
        outcomes: vec![y.into()],
        ..ColumnRoles::default()
    }
}

#[test]
fn two_respondent_oracle_from_csv() {
    let text = "x,y\n1,3\n2,5\n1.5,NA\n1.5,\n";
    let Loaded::Single(s) = read_csv(text.as_bytes(), &roles("y")).unwrap() else {
        panic!("expected one outcome")
    };
    let d = BalancingDesign::identity(1);
    let r = sps_estimate(&s, &d, &Mean::scalar(), &EstimatorOptions::default()).unwrap();
    assert!((r.theta[0] - 4.0).abs() < 1e-12);
    for w in &r.weights {
        assert!((w - 2.0).abs() < 1e-10);
    }
    let p = r.tilting.unwrap();
    assert!(p.lambda0.abs() < 1e-10 && p.lambda1.iter().all(|l| l.abs() < 1e-10));
}

#[test]
fn file_input_matches_in_memory_sample() {
    let s = dgp::study_one(ResponseModel::Rm1, OutcomeModel::Or2, 400, 17).unwrap();
    let mut text = String::from("x1,x2,x3,x4,y\n");
    for i in 0..s.n() {
        let x = s.x_row(i);
        let y = s.y(i).map_or(String::new(), |v| v.to_string());
        text.push_str(&format!("{},{},{},{},{y}\n", x[0], x[1], x[2], x[3]));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    std::fs::write(&path, text).unwrap();
    let Loaded::Single(loaded) = load_csv(&path, &roles("y")).unwrap() else {
        panic!()
    };
    let d = BalancingDesign::identity(4);
    let o = EstimatorOptions::default();
    let a = sps_estimate(&s, &d, &Mean::scalar(), &o).unwrap();
    let b = sps_estimate(&loaded, &d, &Mean::scalar(), &o).unwrap();
    assert_eq!(a.theta, b.theta);
}

#[test]
fn estimate_variance_and_test_agree_on_one_sample() {
    let s = dgp::study_one(ResponseModel::Rm1, OutcomeModel::Or1, 800, 4).unwrap();
    let d = BalancingDesign::identity(4);
    let o = EstimatorOptions::default();
    let (params, w) = calibrate(&s, &d, &o.calibration).unwrap();
    assert!(balancing_residual(&s, &d, &w.omega).unwrap() <= 1e-10);
    let r = sps_estimate(&s, &d, &Mean::scalar(), &o).unwrap();
    let ri = regression_imputation_form(&s, &d, &w).unwrap();
    assert!((r.theta[0] - ri).abs() < 1e-10);
    let v = linearized_variance(&s, &d, &params, &r.theta, &Mean::scalar()).unwrap()[(0, 0)];
    // a Wald interval and the likelihood ratio test should roughly agree at its edge
    let edge = r.theta[0] + 1.96 * v.sqrt();
    let t = el_ratio_test(&s, &d, &Mean::scalar(), &[edge], &ElOptions::default()).unwrap();
    let stat = t.statistic.unwrap();
    assert!(stat > 1.5 && stat < 7.0, "statistic {stat} at the Wald edge");
}

#[test]
fn indicator_estimand_is_consistent_under_mar() {
    let reps = 200;
    let theta0 = dgp::trivariate_theta0();
    let est = Indicator { a: 1, b: 2 };
    let mut ip = Vec::new();
    for r in 0..reps {
        let ms = dgp::trivariate_mar_with(1000, &mut replicate_rng(31, r)).unwrap();
        ip.push(mv_sps_estimate(&ms, &est, &MvOptions::default()).unwrap().result.theta[0]);
    }
    let summary = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
        (m - theta0, sd / (v.len() as f64).sqrt())
    };
    let (bias, mcse) = summary(&ip);
    assert!(bias.abs() <= 3.0 * mcse, "bias {bias} mcse {mcse}");
}
