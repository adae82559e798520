//! One function per subcommand, each turning an effective config into a report.

use serde_json::json;
use smoothps::data::{Basis, BalancingDesign, EstimatingFunction, LeastSquares, Mean, MultiSample, Sample};
use smoothps::dimension_reduction::{kernel_sdr, two_stage_sps, ScadOptions, SdrOptions};
use smoothps::estimators::{estimate, sps_estimate, EstimateResult, EstimatorOptions, Method};
use smoothps::inference::{bootstrap_with, el_ratio_test, linearized_variance, ElMasses, ElOptions};
use smoothps::io::{load_csv, ColumnRoles, Loaded};
use smoothps::multivariate::{complete_case_estimate, mv_linearized_variance, mv_sps_estimate, MvOptions};
use smoothps::simulation::{
    replicates_to_csv, run_monte_carlo, study_one_methods, study_two_methods, MethodSpec, SimConfig, Study,
};

use crate::config::{
    check_level, require, split_list, DataConfig, EltestConfig, EstimateConfig, EstimateMvConfig, SdrConfig,
    SimulateConfig, VarselConfig,
};
use crate::error::CliError;
use crate::report::{finite, to_value, write_file, Report};

fn load(cfg: &DataConfig) -> Result<Loaded, CliError> {
    let path = require(&cfg.data, "data")?;
    let roles = ColumnRoles {
        outcomes: split_list(&require(&cfg.outcome, "outcome")?),
        covariates: cfg.covariates.as_deref().map(split_list),
        response: cfg.response.clone(),
    };
    Ok(load_csv(path, &roles)?)
}

fn load_single(cfg: &DataConfig, log: &mut Vec<String>) -> Result<Sample, CliError> {
    match load(cfg)? {
        Loaded::Single(s) => {
            log.push(format!("read {} rows, {} respondents", s.n(), s.n_respondents()));
            Ok(s)
        }
        Loaded::Multi(_) => Err(CliError::usage("several outcomes given; use estimate-mv")),
    }
}

fn design_for(sample: &Sample, balance: Option<&str>) -> Result<BalancingDesign, CliError> {
    let names = sample.covariate_names();
    match balance {
        Some(spec) => Ok(BalancingDesign::parse(spec, names)?),
        None => Ok(BalancingDesign::identity(sample.d())),
    }
}

fn parse_method(s: &str) -> Result<Method, CliError> {
    match s.parse::<Method>()? {
        m @ (Method::Ip | Method::Mle | Method::Cbps | Method::Ebps) => Ok(m),
        other => Err(CliError::usage(format!(
            "method `{}` needs the true response mechanism and is only available in simulations",
            other.as_str()
        ))),
    }
}

fn set_estimate(report: &mut Report, res: &EstimateResult, level: f64) {
    report.theta = res.theta.clone();
    report.se = res.se.clone();
    report.ci = res.ci(level).map(|v| v.into_iter().map(|(a, b)| [a, b]).collect());
    report.residual = finite(res.diagnostics.balancing_residual);
    report.iterations = Some(res.diagnostics.weight_iterations);
}

fn fit_notes(res: &EstimateResult, log: &mut Vec<String>) {
    let d = &res.diagnostics;
    log.push(format!(
        "weights: {} iterations, balancing residual {:e}, range [{}, {}]",
        d.weight_iterations, d.balancing_residual, d.min_weight, d.max_weight
    ));
    log.push(format!("estimating equation solved in {} iterations", d.theta_iterations));
}

pub fn estimate_cmd(mut cfg: EstimateConfig) -> Result<Report, CliError> {
    check_level("ci_level", cfg.ci_level)?;
    let method = parse_method(&cfg.method)?;
    let variance = cfg
        .variance
        .clone()
        .unwrap_or_else(|| if method == Method::Ip { "linearized" } else { "bootstrap" }.into());
    let (lin, boot) = match variance.as_str() {
        "none" => (false, false),
        "linearized" => (true, false),
        "bootstrap" => (false, true),
        "both" => (true, true),
        other => return Err(CliError::usage(format!("unknown variance `{other}`"))),
    };
    if lin && method != Method::Ip {
        return Err(CliError::usage("linearized variance is available for method ip only; use bootstrap"));
    }
    if boot && cfg.bootstrap_reps < 2 {
        return Err(CliError::usage("--bootstrap-reps must be at least 2"));
    }
    cfg.variance = Some(variance);

    let mut log = Vec::new();
    let sample = load_single(&cfg.data, &mut log)?;
    let design = design_for(&sample, cfg.balance.as_deref())?;
    let (estfun, parameters): (Box<dyn EstimatingFunction>, Vec<String>) = match cfg.estimand.as_str() {
        "mean" => (Box::new(Mean::scalar()), vec!["mean".into()]),
        "least_squares" => {
            let mut names = vec!["intercept".to_string()];
            names.extend(sample.covariate_names().iter().cloned());
            (Box::new(LeastSquares::new(sample.d())), names)
        }
        other => return Err(CliError::usage(format!("unknown estimand `{other}`"))),
    };
    let opts = EstimatorOptions::default();
    let mut res = estimate(method, &sample, &design, estfun.as_ref(), &opts)?;
    fit_notes(&res, &mut log);

    let mut variances = serde_json::Map::new();
    let mut primary = None;
    if lin {
        let params = res.tilting.as_ref().expect("the smoothed fit carries its tilting parameters");
        let v = linearized_variance(&sample, &design, params, &res.theta, estfun.as_ref())?;
        variances.insert("linearized".into(), to_value(&rows(&v))?);
        primary = Some(v);
    }
    if boot {
        let b = bootstrap_with(&sample, cfg.bootstrap_reps, cfg.seed, |s| {
            estimate(method, s, &design, estfun.as_ref(), &opts).map(|r| r.theta)
        })?;
        log.push(format!("bootstrap: {} of {} replicates failed", b.failed, cfg.bootstrap_reps));
        variances.insert(
            "bootstrap".into(),
            json!({ "cov": rows(&b.cov), "reps": cfg.bootstrap_reps, "failed": b.failed }),
        );
        primary.get_or_insert(b.cov);
    }
    if let Some(v) = &primary {
        res = res.with_cov(v);
    }

    let mut report = Report::new("estimate", &cfg)?;
    report.parameters = parameters;
    set_estimate(&mut report, &res, cfg.ci_level);
    report.details = json!({
        "method": method.as_str(),
        "balance": design.labels(sample.covariate_names()),
        "diagnostics": to_value(&res.diagnostics)?,
        "tilting": to_value(&res.tilting)?,
        "variance": variances,
    });
    report.log = log;
    Ok(report)
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}

pub fn estimate_mv_cmd(cfg: EstimateMvConfig) -> Result<Report, CliError> {
    check_level("ci_level", cfg.ci_level)?;
    let ms: MultiSample = match load(&cfg.data)? {
        Loaded::Multi(m) => m,
        Loaded::Single(_) => return Err(CliError::usage("estimate-mv needs at least two outcomes; use estimate")),
    };
    let mut log = vec![format!("read {} rows, {} outcomes", ms.n(), ms.p())];
    let estfun = Mean::new(ms.p());
    let opts = MvOptions {
        include_x: cfg.include_x,
        ..MvOptions::default()
    };
    let est = mv_sps_estimate(&ms, &estfun, &opts)?;
    let v = mv_linearized_variance(&ms, &est.tilting, &est.result.theta, &estfun)?;
    let res = est.result.clone().with_cov(&v);
    fit_notes(&res, &mut log);
    let cc = complete_case_estimate(&ms, &estfun, &opts.estimator)?;

    let patterns: Vec<serde_json::Value> = est
        .partition
        .patterns
        .iter()
        .zip(&est.partition.counts)
        .map(|(&mask, &count)| {
            let observed: Vec<&String> =
                (0..ms.p()).filter(|k| mask >> k & 1 == 1).map(|k| &ms.outcome_names()[k]).collect();
            json!({ "mask": mask, "observed": observed, "count": count })
        })
        .collect();
    for f in &est.tilting.fits {
        if !f.merged.is_empty() {
            log.push(format!("pattern {} absorbed patterns {:?}", f.mask, f.merged));
        }
    }
    let mut report = Report::new("estimate-mv", &cfg)?;
    report.parameters = ms.outcome_names().iter().map(|n| format!("mean({n})")).collect();
    set_estimate(&mut report, &res, cfg.ci_level);
    report.details = json!({
        "patterns": patterns,
        "fits": to_value(&est.tilting.fits)?,
        "diagnostics": to_value(&res.diagnostics)?,
        "complete_case": cc.theta,
        "cov": rows(&v),
    });
    report.log = log;
    Ok(report)
}

pub fn simulate_cmd(cfg: SimulateConfig) -> Result<Report, CliError> {
    check_level("ci_level", cfg.ci_level)?;
    let study = match cfg.study.as_str() {
        "one" => Study::One {
            rm: cfg.rm.parse()?,
            or: cfg.or.parse()?,
        },
        "two" => Study::Two {
            scenario: cfg.scenario.parse()?,
        },
        other => return Err(CliError::usage(format!("unknown study `{other}`"))),
    };
    let names: Vec<String> = (1..=study.d()).map(|j| format!("x{j}")).collect();
    let methods = if cfg.methods.is_none() && cfg.balance.is_none() {
        match study {
            Study::One { .. } => study_one_methods(),
            Study::Two { .. } => study_two_methods(),
        }
    } else {
        let design = match &cfg.balance {
            Some(spec) => BalancingDesign::parse(spec, &names)?,
            None => BalancingDesign::identity(study.d()),
        };
        let list = cfg.methods.clone().unwrap_or_else(|| match study {
            Study::One { .. } => "ip,mle,cbps,ebps".into(),
            Study::Two { .. } => "ip".into(),
        });
        split_list(&list)
            .iter()
            .map(|m| Ok(MethodSpec::new(m.as_str(), m.parse::<Method>()?, design.clone())))
            .collect::<Result<Vec<_>, CliError>>()?
    };
    let mut sim = SimConfig::new(study, cfg.n, cfg.reps, cfg.seed, methods);
    sim.variance = cfg.variance;
    sim.level = cfg.ci_level;
    let out = run_monte_carlo(&sim)?;

    if let Some(path) = &cfg.metrics {
        write_file(path, &out.table.to_csv_string()?)?;
    }
    if let Some(path) = &cfg.replicates {
        write_file(path, &replicates_to_csv(&out.replicates)?)?;
    }
    let failures: serde_json::Map<String, serde_json::Value> =
        out.table.rows.iter().map(|r| (r.method.clone(), json!(r.failed))).collect();
    let mut report = Report::new("simulate", &cfg)?;
    report.log = out
        .table
        .rows
        .iter()
        .filter(|r| r.failed > 0)
        .map(|r| format!("method {}: {} of {} fits failed", r.method, r.failed, cfg.reps))
        .collect();
    report.parameters = out.table.rows.iter().map(|r| r.method.clone()).collect();
    report.theta = out.table.rows.iter().map(|r| r.bias + r.theta0).collect();
    report.residual = out.table.rows.iter().filter_map(|r| r.max_residual).reduce(f64::max);
    report.details = json!({
        "study": to_value(&study)?,
        "theta0": study.theta0(),
        "methods": to_value(&sim.methods)?,
        "metrics": to_value(&out.table.rows)?,
        "failures": failures,
    });
    Ok(report)
}

pub fn varsel_cmd(cfg: VarselConfig) -> Result<Report, CliError> {
    check_level("ci_level", cfg.ci_level)?;
    let mut log = Vec::new();
    let sample = load_single(&cfg.data, &mut log)?;
    let scad = ScadOptions {
        a: cfg.scad_a,
        grid_size: cfg.grid_size,
        grid_ratio: cfg.grid_ratio,
        ..ScadOptions::default()
    };
    let res = two_stage_sps(&sample, &scad, &EstimatorOptions::default())?;
    let names = sample.covariate_names();
    let selected: Vec<&String> = res.selection.support.iter().map(|&j| &names[j]).collect();
    log.push(format!("selected {} of {} covariates at lambda {}", selected.len(), sample.d(), res.selection.lambda));
    fit_notes(&res.estimate, &mut log);

    let mut report = Report::new("varsel", &cfg)?;
    report.parameters = vec!["mean".into()];
    set_estimate(&mut report, &res.estimate, cfg.ci_level);
    report.details = json!({
        "selected": selected,
        "selection": to_value(&res.selection)?,
        "diagnostics": to_value(&res.estimate.diagnostics)?,
    });
    report.log = log;
    Ok(report)
}

pub fn sdr_cmd(cfg: SdrConfig) -> Result<Report, CliError> {
    check_level("ci_level", cfg.ci_level)?;
    let mut log = Vec::new();
    let sample = load_single(&cfg.data, &mut log)?;
    let opts = SdrOptions {
        seed: cfg.seed,
        restarts: cfg.restarts,
        eps: cfg.eps,
        ..SdrOptions::default()
    };
    let proj = kernel_sdr(&sample, cfg.dim, &opts)?;
    log.push(format!(
        "projection: objective {} after {} iterations, converged {}",
        proj.objective, proj.iterations, proj.converged
    ));
    let design = BalancingDesign::new(proj.w.iter().map(|w| Basis::Linear(w.clone())).collect());
    let estfun = Mean::scalar();
    let res = sps_estimate(&sample, &design, &estfun, &EstimatorOptions::default())?;
    let params = res.tilting.as_ref().expect("the smoothed fit carries its tilting parameters");
    let v = linearized_variance(&sample, &design, params, &res.theta, &estfun)?;
    let res = res.with_cov(&v);
    fit_notes(&res, &mut log);

    let mut report = Report::new("sdr", &cfg)?;
    report.parameters = vec!["mean".into()];
    set_estimate(&mut report, &res, cfg.ci_level);
    report.details = json!({
        "w": proj.w,
        "covariates": sample.covariate_names(),
        "projection": to_value(&proj)?,
        "diagnostics": to_value(&res.diagnostics)?,
    });
    report.log = log;
    Ok(report)
}

pub fn eltest_cmd(cfg: EltestConfig) -> Result<Report, CliError> {
    check_level("alpha", cfg.alpha)?;
    let theta0 = require(&cfg.theta0, "theta0")?;
    let masses = match cfg.masses.as_str() {
        "full_sample" => ElMasses::FullSample,
        "respondents" => ElMasses::Respondents,
        other => return Err(CliError::usage(format!("unknown masses `{other}`"))),
    };
    let mut log = Vec::new();
    let sample = load_single(&cfg.data, &mut log)?;
    let design = design_for(&sample, cfg.balance.as_deref())?;
    let opts = ElOptions {
        masses,
        ..ElOptions::default()
    };
    let t = el_ratio_test(&sample, &design, &Mean::scalar(), &[theta0], &opts)?;
    if !t.feasible {
        log.push("hypothesized value lies outside the empirical likelihood support".into());
    }
    let mut report = Report::new("eltest", &cfg)?;
    report.parameters = vec!["mean".into()];
    report.theta = t.theta_hat.clone();
    report.details = json!({
        "theta0": t.theta0,
        "statistic": t.statistic,
        "p_value": t.p_value,
        "df": t.df,
        "feasible": t.feasible,
        "reject": t.p_value < cfg.alpha,
    });
    report.log = log;
    Ok(report)
}
