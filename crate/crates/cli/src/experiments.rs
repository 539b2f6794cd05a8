//! One runner per experiment kind; each returns a CSV table and a JSON report body.

use isosle_core::algebra::{Complex, Mat2C};
use isosle_core::confluence::{confluence_rate, split_double_pole, vandermonde_split, default_targets};
use isosle_core::isomonodromy::LaxFamily;
use isosle_core::loewner::driving::DrivingKind;
use isosle_core::loewner::{run_trajectory, LoewnerState};
use isosle_core::martingale::{mc_paths, run_observable, summarize};
use isosle_core::verify::{
    cross_module_suite, random_generic_configs, residual_ladder, Node, SuiteConfig, TauTraceObservable,
};
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, Experiment};
use crate::CliError;

/// Tabular output with a fixed header.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }
}

fn f(x: f64) -> String {
    format!("{x:?}")
}

fn cx(z: Complex) -> Value {
    json!([z.re, z.im])
}

fn push_complex(row: &mut Vec<String>, z: Complex) {
    row.push(f(z.re));
    row.push(f(z.im));
}

fn mat_json(m: &Mat2C) -> Value {
    json!([[cx(m.a11), cx(m.a12)], [cx(m.a21), cx(m.a22)]])
}

/// Result of one experiment before it is written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub pass: bool,
    /// Failure summary placed in the report when `pass` is false.
    pub failure: Option<String>,
    pub table: Table,
    pub report: Value,
}

fn numerical<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Numerical(e.to_string())
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    match cfg.experiment {
        Experiment::Trajectory => trajectory(cfg),
        Experiment::Ledger => ledger(cfg),
        Experiment::Mc | Experiment::McRho => monte_carlo(cfg),
        Experiment::Confluence => confluence(cfg),
        Experiment::Bpz => bpz(cfg),
        Experiment::Hormander => hormander(cfg),
        Experiment::Suite => suite(cfg),
    }
}

fn family(cfg: &ExperimentConfig) -> Result<LaxFamily, CliError> {
    cfg.family.build().map_err(|e| CliError::Validation(format!("family: {e}")))
}

fn trajectory(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let fam = family(cfg)?;
    let states = run_trajectory(&cfg.driving, &fam.lambda, &fam.s, &cfg.control).map_err(numerical)?;
    let header = LoewnerState::csv_header(fam.n());
    let rows = states.iter().map(|s| s.csv_row().into_iter().map(f).collect()).collect();
    let end = states.last().expect("trajectory has an initial state");
    let report = json!({
        "steps": states.len() - 1,
        "t_end": end.t,
        "stopped": end.stopped,
        "final": {
            "Z": end.z,
            "Lambda": end.lambda_t.iter().copied().map(cx).collect::<Vec<_>>(),
            "gprime": end.gprime.iter().copied().map(cx).collect::<Vec<_>>(),
            "preschwarz": end.preschwarz.iter().copied().map(cx).collect::<Vec<_>>(),
            "schwarz": end.schwarz.iter().copied().map(cx).collect::<Vec<_>>(),
            "S": end.birkhoff.iter().copied().map(cx).collect::<Vec<_>>(),
        },
    });
    Ok(Outcome { pass: true, failure: None, table: Table { header, rows }, report })
}

fn ledger(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let fam = family(cfg)?;
    let mut samples = Vec::new();
    let flow = run_observable(&fam, &cfg.driving, &cfg.control, Some(&mut samples)).map_err(numerical)?;
    let mut table = Table::new(&[
        "t", "Z", "trA2_re", "trA2_im", "rateF_re", "rateF_im", "rateTau_re", "rateTau_im", "residual_re",
        "residual_im", "relative", "alpha_drift", "trM_re", "trM_im",
    ]);
    for s in &samples {
        let mut row = vec![f(s.t), f(s.z)];
        for v in [s.ledger.tr_a2, s.ledger.rate_f, s.ledger.rate_tau, s.ledger.residual] {
            push_complex(&mut row, v);
        }
        row.push(f(s.ledger.relative()));
        row.push(f(s.alpha_drift));
        push_complex(&mut row, s.m.trace());
        table.rows.push(row);
    }
    let tol = cfg.tolerances;
    let pass = flow.max_ledger <= tol.ledger && flow.max_alpha_drift <= tol.alpha;
    let report = json!({
        "t_end": flow.lo.t,
        "stopped": flow.lo.stopped,
        "max_ledger_residual": flow.max_ledger,
        "max_alpha_drift": flow.max_alpha_drift,
        "max_covariance_mismatch": flow.max_f_mismatch,
        "ledger_tolerance": tol.ledger,
        "alpha_tolerance": tol.alpha,
    });
    let failure = (!pass).then(|| "drift ledger check failed".to_string());
    Ok(Outcome { pass, failure, table, report })
}

fn monte_carlo(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let rho = cfg.experiment == Experiment::McRho;
    match (&cfg.driving.kind, rho) {
        (DrivingKind::Brownian { .. }, false) | (DrivingKind::SleKappaRho { .. }, true) => {}
        _ => {
            let want = if rho { "SLE_KAPPA_RHO" } else { "BROWNIAN" };
            return Err(CliError::Validation(format!("{} needs a {want} driving", if rho { "MC_RHO" } else { "MC" })));
        }
    }
    let fam = family(cfg)?;
    let results = mc_paths(&fam, &cfg.driving, cfg.paths, &cfg.control).map_err(numerical)?;
    let rep = summarize(&cfg.driving, &results);
    let mut table = Table::new(&[
        "path", "t_end", "stopped", "m11_re", "m11_im", "m12_re", "m12_im", "m21_re", "m21_im", "m22_re", "m22_im",
        "trace_re", "trace_im",
    ]);
    for (k, r) in results.iter().enumerate() {
        let mut row = vec![k.to_string(), f(r.t_end), r.stopped.to_string()];
        for v in r.m.entries() {
            push_complex(&mut row, v);
        }
        push_complex(&mut row, r.m.trace());
        table.rows.push(row);
    }
    let tol = cfg.tolerances;
    let within = rep.within(tol.mc_sigma);
    let alpha_ok = rep.alpha_max_drift <= tol.alpha;
    let pass = within && alpha_ok;
    let failure = if !within {
        Some("martingale check failed".to_string())
    } else if !alpha_ok {
        Some("alpha constancy check failed".to_string())
    } else {
        None
    };
    let mut report = serde_json::to_value(&rep).map_err(|e| CliError::Numerical(e.to_string()))?;
    report["z_score"] = json!(rep.trace_z_score());
    report["sigma_bound"] = json!(tol.mc_sigma);
    report["guard"] = json!(cfg.control.guard);
    Ok(Outcome { pass, failure, table, report })
}

fn confluence(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let p = cfg.confluence.clone().unwrap_or_default();
    let tol = cfg.tolerances;
    let rate = confluence_rate(&p.spec, &p.probes, &p.eps_ladder).map_err(numerical)?;
    let poles = if p.spec.k == 1 {
        split_double_pole(&p.spec).map_err(numerical)?.to_vec()
    } else {
        vandermonde_split(&p.spec, &default_targets(&p.spec)).map_err(numerical)?
    };
    // Moment identities Σ (λⱼ−λ)^m Aⱼ = target_m for m = 0..k.
    let targets = default_targets(&p.spec);
    let mut split_err: f64 = 0.0;
    for (m, t) in targets.iter().enumerate() {
        let mut acc = Mat2C::zero();
        for q in &poles {
            acc += q.residue * (q.lambda - p.spec.base_lambda).powi(m as i32);
        }
        split_err = split_err.max((acc - *t).frobenius_norm() / t.frobenius_norm().max(1.0));
    }
    let mut table = Table::new(&["eps", "mismatch"]);
    for (e, m) in rate.eps.iter().zip(&rate.mismatch) {
        table.rows.push(vec![f(*e), f(*m)]);
    }
    let slope_ok = rate.slope >= tol.slope_min && rate.slope <= tol.slope_max;
    let split_ok = split_err <= tol.split;
    let pass = slope_ok && split_ok;
    let report = json!({
        "k": p.spec.k,
        "slope": rate.slope,
        "slope_range": [tol.slope_min, tol.slope_max],
        "split_identity_error": split_err,
        "residues": poles.iter().map(|q| json!({"lambda": cx(q.lambda), "residue": mat_json(&q.residue)})).collect::<Vec<_>>(),
    });
    let failure = (!pass).then(|| "confluence check failed".to_string());
    Ok(Outcome { pass, failure, table, report })
}

fn bpz(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let p = cfg.bpz.clone().unwrap_or_default();
    let fam = family(cfg)?;
    let tol = cfg.tolerances;
    let obs = TauTraceObservable::new(fam.clone(), p.z_base, tol.tol_ode);
    let base = Node { z: p.z0, xi: p.xi, lambda: fam.lambda.clone(), s: fam.s.clone() };
    let lad = residual_ladder(&obs, &base, &p.h_ladder).map_err(|e| match e {
        isosle_core::verify::VerifyError::StencilTooCoarse { .. } => CliError::Validation(e.to_string()),
        _ => numerical(e),
    })?;
    let mut table = Table::new(&["h", "residual_re", "residual_im", "order_estimate"]);
    for r in &lad.rows {
        table.rows.push(vec![f(r.h), f(r.residual_re), f(r.residual_im), r.order_estimate.map(f).unwrap_or_default()]);
    }
    let order_ok = lad.order.is_some_and(|o| o >= tol.bpz_order);
    let bound_ok = lad.terminal_residual() <= lad.terminal_bound();
    let pass = order_ok && bound_ok;
    let report = json!({
        "operator": if p.xi.is_some() { "force_point" } else { "bpz" },
        "z0": p.z0,
        "xi": p.xi,
        "order": lad.order,
        "order_min": tol.bpz_order,
        "terminal_residual": lad.terminal_residual(),
        "terminal_bound": lad.terminal_bound(),
        "tol_ode": lad.tol_ode,
    });
    let failure = (!pass).then(|| "BPZ residual check failed".to_string());
    Ok(Outcome { pass, failure, table, report })
}

fn hormander(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let p = cfg.hormander.clone().unwrap_or_default();
    let tol = cfg.tolerances;
    let mut configs = p.configs.clone();
    configs.extend(random_generic_configs(p.random, cfg.seed(), p.min_separation));
    let mut table = Table::new(&[
        "index", "n", "z", "xi", "det_re", "det_im", "scale", "ratio", "rank", "dim", "real_puncture", "pass",
    ]);
    let (mut generic, mut generic_ok, mut real, mut real_ok) = (0usize, 0usize, 0usize, 0usize);
    let mut min_ratio = f64::INFINITY;
    for (k, h) in configs.iter().enumerate() {
        let m = h.matrix().map_err(|e| CliError::Validation(format!("hormander config {k}: {e}")))?;
        let det = m.determinant();
        let scale = m.scale();
        let ratio = det.norm() / scale;
        let rank = m.numerical_rank(tol.hormander_rank);
        let has_real = h.lambda.iter().any(|l| l.im == 0.0);
        let ok = if has_real {
            real += 1;
            rank < m.dim
        } else {
            generic += 1;
            min_ratio = min_ratio.min(ratio);
            det.norm() > tol.hormander_det * scale
        };
        if ok {
            if has_real { real_ok += 1 } else { generic_ok += 1 }
        }
        let mut row = vec![k.to_string(), h.lambda.len().to_string(), f(h.z), f(h.xi)];
        push_complex(&mut row, det);
        row.extend([f(scale), f(ratio), rank.to_string(), m.dim.to_string(), has_real.to_string(), ok.to_string()]);
        table.rows.push(row);
    }
    let pass = generic_ok == generic && real_ok == real;
    let report = json!({
        "generic": generic,
        "generic_nondegenerate": generic_ok,
        "min_generic_ratio": if generic > 0 { json!(min_ratio) } else { Value::Null },
        "real": real,
        "real_rank_deficient": real_ok,
        "det_threshold": tol.hormander_det,
        "rank_threshold": tol.hormander_rank,
    });
    let failure = (!pass).then(|| "Hörmander check failed".to_string());
    Ok(Outcome { pass, failure, table, report })
}

fn suite(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let sc = SuiteConfig {
        family: cfg.family.clone(),
        driving: cfg.driving.clone(),
        control: cfg.control,
        tolerances: cfg.tolerances.suite,
    };
    let rep = cross_module_suite(&sc);
    let mut table = Table::new(&["check", "status", "max_deviation", "tolerance", "detail"]);
    let mut checks = Vec::new();
    for ch in &rep.checks {
        let status = if ch.pass { "pass" } else { "fail" };
        table.rows.push(vec![
            ch.name.clone(),
            status.into(),
            f(ch.max_deviation),
            f(ch.tolerance),
            ch.detail.clone().unwrap_or_default(),
        ]);
        checks.push(json!({
            "name": ch.name,
            "status": status,
            "max_deviation": ch.max_deviation,
            "tolerance": ch.tolerance,
            "detail": ch.detail,
        }));
    }
    let pass = rep.all_pass();
    let failure = (!pass).then(|| {
        let failed: Vec<&str> = rep.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
        format!("suite checks failed: {}", failed.join(", "))
    });
    Ok(Outcome { pass, failure, table, report: json!({ "checks": checks }) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use isosle_core::algebra::c;

    #[test]
    fn float_formatting_round_trips() {
        for x in [0.1, 1e-300, -2.5e17, 0.7071067811865476] {
            assert_eq!(f(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(cx(c(1.0, -2.0)), json!([1.0, -2.0]));
    }
}
