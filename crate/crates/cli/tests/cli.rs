use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Value;
use smoothps_cli::report::Report;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_smoothps"));
    c.env_remove("SMOOTHPS_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

/// Linear outcome on two covariates, response depending on `x1`.
fn write_data(dir: &Path) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut text = String::from("x1,x2,y\n");
    for _ in 0..150 {
        let x1: f64 = rng.sample(StandardNormal);
        let x2: f64 = rng.sample(StandardNormal);
        let e: f64 = rng.sample(StandardNormal);
        let y = 1.0 + x1 - 0.5 * x2 + e;
        let p = 1.0 / (1.0 + (-(0.5 + 0.5 * x1)).exp());
        if rng.random::<f64>() < p {
            text.push_str(&format!("{x1},{x2},{y}\n"));
        } else {
            text.push_str(&format!("{x1},{x2},NA\n"));
        }
    }
    let path = dir.join("data.csv");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn estimate_report_has_the_documented_fields() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let out = run(&["estimate", "--data", data.to_str().unwrap(), "--outcome", "y", "--balance", "x1,x2", "--method", "ip"]);
    let r = json(&out);
    for key in ["theta", "se", "ci", "residual", "iterations", "config", "version"] {
        assert!(!r[key].is_null(), "missing {key}");
    }
    let theta = r["theta"][0].as_f64().unwrap();
    let ci = &r["ci"][0];
    assert!(ci[0].as_f64().unwrap() < theta && theta < ci[1].as_f64().unwrap());
    assert!(r["residual"].as_f64().unwrap() <= 1e-10);
    assert_eq!(r["config"]["variance"], "linearized");
    assert_eq!(r["config"]["ci_level"], 0.95);
}

#[test]
fn unknown_method_is_a_usage_error() {
    let out = run(&["estimate", "--data", "x.csv", "--outcome", "y", "--method", "foo"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_balance_column_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let out = run(&["estimate", "--data", data.to_str().unwrap(), "--outcome", "y", "--balance", "z9"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("z9"));
}

#[test]
fn missing_required_option_is_a_usage_error() {
    let out = run(&["estimate", "--outcome", "y"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--data"));
}

#[test]
fn unreadable_input_is_an_io_error() {
    let out = run(&["estimate", "--data", "/nonexistent/data.csv", "--outcome", "y"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn non_numeric_cell_is_an_io_error_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "x1,y\n1,2\n2,3\nfoo,4\n").unwrap();
    let out = run(&["estimate", "--data", path.to_str().unwrap(), "--outcome", "y"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 4") && err.contains("x1"), "{err}");
}

#[test]
fn separated_calibration_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sep.csv");
    let mut text = String::from("x,y\n");
    for i in 0..10 {
        text.push_str(&format!("{},{}\n", i as f64 / 10.0, i));
    }
    for i in 0..10 {
        text.push_str(&format!("{},NA\n", 5.0 + i as f64));
    }
    std::fs::write(&path, text).unwrap();
    let out = run(&["estimate", "--data", path.to_str().unwrap(), "--outcome", "y"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn flags_override_config_file_over_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "threads = 1\n[estimate]\ndata = {:?}\noutcome = \"y\"\nmethod = \"cbps\"\nci_level = 0.9\nbootstrap_reps = 20\n",
            data.to_str().unwrap()
        ),
    )
    .unwrap();
    let out = run(&["estimate", "--config", cfg.to_str().unwrap(), "--ci-level", "0.8"]);
    let r = json(&out);
    assert_eq!(r["config"]["method"], "cbps");
    assert_eq!(r["config"]["ci_level"], 0.8);
    assert_eq!(r["config"]["bootstrap_reps"], 20);
    assert_eq!(r["config"]["variance"], "bootstrap");
    assert_eq!(r["config"]["seed"], 0);
    assert_eq!(r["details"]["variance"]["bootstrap"]["reps"], 20);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[estimate]\nmethd = \"ip\"\n").unwrap();
    let out = run(&["estimate", "--config", cfg.to_str().unwrap(), "--data", "d.csv", "--outcome", "y"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("methd"));
}

#[test]
fn report_round_trips_through_json() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let out_path = dir.path().join("r.json");
    let status = bin()
        .args(["estimate", "--data", data.to_str().unwrap(), "--outcome", "y", "--variance", "both", "--reps", "30"])
        .arg("--out")
        .arg(&out_path)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out_path).unwrap();
    let report = Report::from_json(&text).unwrap();
    assert_eq!(report.to_json().unwrap(), text);
    let again = Report::from_json(&report.to_json().unwrap()).unwrap();
    assert_eq!(again, report);
    assert_eq!(report.command, "estimate");
}

#[test]
fn thread_count_does_not_change_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let args = ["estimate", "--data", data.to_str().unwrap(), "--outcome", "y", "--method", "ebps", "--reps", "40", "--seed", "9"];
    let one = bin().args(args).env("SMOOTHPS_THREADS", "1").output().unwrap();
    let four = bin().args(args).arg("--threads").arg("4").output().unwrap();
    assert!(one.status.success() && four.status.success());
    assert_eq!(one.stdout, four.stdout);
}

#[test]
fn simulate_writes_metrics_csv_and_failure_counts() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = dir.path().join("m.csv");
    let reps = dir.path().join("reps.csv");
    let out = run(&[
        "simulate", "--study", "one", "--rm", "rm1", "--or", "or2", "--n", "400", "--reps", "8", "--seed", "1",
        "--methods", "ip,ebps", "--metrics", metrics.to_str().unwrap(), "--replicates", reps.to_str().unwrap(),
    ]);
    let r = json(&out);
    let csv = std::fs::read_to_string(&metrics).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,estimand,theta0,reps,failed,bias,se,rmse,mean_variance,coverage,max_residual"
    );
    assert_eq!(lines.count(), 2);
    assert_eq!(std::fs::read_to_string(&reps).unwrap().lines().count(), 1 + 2 * 8);
    assert!(r["details"]["failures"]["ip"].is_u64());
    assert_eq!(r["details"]["theta0"], 15.5);
    assert_eq!(r["parameters"], serde_json::json!(["ip", "ebps"]));
}

#[test]
fn estimate_mv_reports_patterns() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mv.csv");
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut text = String::from("x,y1,y2\n");
    for _ in 0..200 {
        let x: f64 = rng.sample(StandardNormal);
        let y1 = x + rng.sample::<f64, _>(StandardNormal);
        let y2 = 0.5 * y1 + rng.sample::<f64, _>(StandardNormal);
        let p = 1.0 / (1.0 + (-(0.5 + y1)).exp());
        if rng.random::<f64>() < p {
            text.push_str(&format!("{x},{y1},{y2}\n"));
        } else {
            text.push_str(&format!("{x},{y1},\n"));
        }
    }
    std::fs::write(&path, text).unwrap();
    let r = json(&run(&["estimate-mv", "--data", path.to_str().unwrap(), "--outcome", "y1,y2"]));
    assert_eq!(r["theta"].as_array().unwrap().len(), 2);
    assert_eq!(r["se"].as_array().unwrap().len(), 2);
    let patterns = r["details"]["patterns"].as_array().unwrap();
    assert_eq!(patterns[0]["mask"], 3);
    assert_eq!(patterns[1]["observed"], serde_json::json!(["y1"]));
    let total: u64 = patterns.iter().map(|p| p["count"].as_u64().unwrap()).sum();
    assert_eq!(total, 200);
}

#[test]
fn eltest_flags_far_hypotheses() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let d = data.to_str().unwrap();
    let near = json(&run(&["estimate", "--data", d, "--outcome", "y", "--variance", "none"]));
    let hat = near["theta"][0].as_f64().unwrap();
    let at_hat = json(&run(&["eltest", "--data", d, "--outcome", "y", "--theta0", &hat.to_string()]));
    assert!(at_hat["details"]["statistic"].as_f64().unwrap() <= 1e-6);
    assert_eq!(at_hat["details"]["reject"], false);
    let far = json(&run(&["eltest", "--data", d, "--outcome", "y", "--theta0", &(hat + 2.0).to_string()]));
    assert_eq!(far["details"]["reject"], true);
}
