//! Runs an [`ExperimentConfig`] into a JSON summary plus CSV tables, and
//! aggregates finished runs into a per-criterion report.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use thiserror::Error;

use crate::brw::{forward_survey_with_tails, BrwError, ForwardOptions};
use crate::io::{
    read_tree_rows, write_tree_rows, Command, ExperimentConfig, IoError, OracleTarget, RecordTable, SpineOp, Tilt,
    WalkOp,
};
use crate::model::{ModelAnalytics, ModelError, ModelSpec, Regime};
use crate::oracle::{enumerate_tree_expectation, enumerate_walk_functional, TreeFunctional, WalkFunctional};
use crate::replica::{Plan, SEED_SCHEDULE};
use crate::spine::{
    alive_indicator, estimate_eh, estimate_survival_spine, many_to_one_estimate, spine_marginal_check,
    survival_renewal, CountBias, SpineError,
};
use crate::stats::{estimate_constants, power_of_two_grid, tail_fit, EstimateWithCI, MeanAcc, TailMode, TreeSurvival};
use crate::walk::{
    estimate_C_R, overshoot_mean, passage_probability, renewal_function, tanaka_into, RenewalFn, RenewalMethod,
    TanakaScratch, TiltedWalk,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] IoError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("invalid parameters: {0}")]
    Invalid(String),
    #[error("{0}")]
    Run(String),
}

impl ExperimentError {
    /// Errors caused by the configuration rather than the run.
    pub fn is_config(&self) -> bool {
        !matches!(self, ExperimentError::Run(_))
    }
}

fn run_err(e: impl Display) -> ExperimentError {
    ExperimentError::Run(e.to_string())
}

impl From<BrwError> for ExperimentError {
    fn from(e: BrwError) -> Self {
        match e {
            BrwError::BadStart(_) | BrwError::BadLevel { .. } => ExperimentError::Invalid(e.to_string()),
            other => run_err(other),
        }
    }
}

impl From<SpineError> for ExperimentError {
    fn from(e: SpineError) -> Self {
        match e {
            SpineError::Invalid(m) => ExperimentError::Invalid(m),
            SpineError::Model(m) => ExperimentError::Model(m),
            other => run_err(other),
        }
    }
}

/// Result of one run. `summary` does not depend on the worker count.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub summary: Value,
    /// `(file name, CSV text)`.
    pub tables: Vec<(String, String)>,
    pub truncated_fraction: f64,
}

impl Outcome {
    pub fn summary_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        s.push('\n');
        s
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Outcome, ExperimentError> {
    cfg.validate()?;
    let plan = Plan::new(cfg.seed, cfg.workers);
    let model = cfg.model.as_ref();
    let need = || model.ok_or_else(|| ExperimentError::Invalid("missing model".into()));
    let (result, tables, truncated_fraction) = match &cfg.command {
        Command::AnalyzeModel => analyze(need()?)?,
        Command::Simulate { x, levels, replicas, caps, survival_curve, check_exploration } => {
            let fopts = ForwardOptions { stop_at_top: false, check_exploration: *check_exploration, keep_rows: true };
            let grid = survival_curve.clone().unwrap_or_default();
            let (summary, rows, tails) =
                forward_survey_with_tails(need()?, *x, levels, *replicas, *caps, fopts, &grid, &plan)?;
            let mut csv = Vec::new();
            write_tree_rows(&mut csv, &RecordTable { levels: levels.clone(), rows })?;
            let mut tables = vec![("records.csv".to_string(), String::from_utf8(csv).expect("utf-8"))];
            let mut result = json!({ "forward": summary });
            if !grid.is_empty() {
                tables.push(("survival_curve.csv".into(), survival_csv(&tails)));
                result["survival_curve"] = survival_json(&tails);
            }
            (result, tables, summary.truncated as f64 / (*replicas).max(1) as f64)
        }
        Command::Walk { tilt, op, x, t, replicas, max_steps, grid, method, steps } => {
            walk_command(need()?, *tilt, *op, *x, *t, *replicas, *max_steps, grid.as_deref(), *method, *steps, &plan)?
        }
        Command::Spine { op, x, t, replicas, depth, caps, renewal_replicas } => {
            let m = need()?;
            let a = m.analyze()?;
            let rho = a.regime_rho().ok_or_else(|| ExperimentError::Invalid("model is out of scope".into()))?;
            match op {
                SpineOp::Eh => {
                    let e = estimate_eh(m, *x, *t, *replicas, &plan)?;
                    let tf = e.truncated_fraction;
                    (estimate_json(&e, e.n_effective, e.truncated), vec![], tf)
                }
                SpineOp::Survival => {
                    let r = survival_renewal(m, *t, *renewal_replicas, 1_000_000, &plan)?;
                    let s = estimate_survival_spine(m, *x, *t, &r, *replicas, *caps, &plan)?;
                    let critical = a.regime == Regime::Critical;
                    let scale = if critical { *t } else { 1.0 } * (rho * t).exp();
                    let mut out = estimate_json(&s.estimate, s.effective_sample_size, s.flagged);
                    out["scaled"] = json!(s.estimate.scale(scale));
                    out["spine_killed"] = json!(s.spine_killed);
                    out["rho"] = json!(rho);
                    (out, vec![], s.flagged as f64 / (*replicas).max(1) as f64)
                }
                SpineOp::Many21 => many21(m, rho, *x, *depth, *replicas, &plan)?,
                SpineOp::MarginalCheck => {
                    let d = (*depth).min(3);
                    let good = spine_marginal_check(m, rho, d, CountBias::SizeBiased)?;
                    let control = spine_marginal_check(m, rho, d, CountBias::Unbiased)?;
                    let out = json!({
                        "estimate": good.total_variation,
                        "stderr": 0.0,
                        "effective_sample_size": Value::Null,
                        "truncated_count": 0,
                        "size_biased": good,
                        "unbiased_control": control,
                    });
                    (out, vec![], 0.0)
                }
            }
        }
        Command::Estimate { records, mode, grid, range, constants_replicas } => {
            estimate_command(need()?, records, *mode, grid.as_deref(), *range, *constants_replicas, &plan)?
        }
        Command::Oracle { x, target } => {
            let m = need()?;
            let out = match target {
                OracleTarget::Tree { functional } => {
                    let v = enumerate_tree_expectation(m, *x, *functional).map_err(run_err)?;
                    json!({ "name": functional.name(), "value": v, "error_bound": 0.0 })
                }
                OracleTarget::Walk { tilt, functional } => {
                    let walk = TiltedWalk::new(m, tilt_rho(&m.analyze()?, *tilt)?).map_err(run_err)?;
                    let v = enumerate_walk_functional(&walk, *x, *functional).map_err(run_err)?;
                    json!({ "value": v.value, "error_bound": v.error_bound })
                }
            };
            (out, vec![], 0.0)
        }
        Command::Report { run_dir } => {
            let rows = report(run_dir)?;
            let csv = report_csv(&rows);
            (json!({ "criteria": rows }), vec![("report.csv".into(), csv)], 0.0)
        }
    };
    let summary = json!({
        "command": cfg.command,
        "model": model,
        "seed": cfg.seed,
        "seed_schedule": SEED_SCHEDULE,
        "result": result,
        "truncated_fraction": truncated_fraction,
    });
    Ok(Outcome { summary, tables, truncated_fraction })
}

type Parts = (Value, Vec<(String, String)>, f64);

fn analyze(m: &ModelSpec) -> Result<Parts, ExperimentError> {
    let a = m.analyze()?;
    let out = json!({
        "analytics": a,
        "tail_exponent": a.tail_exponent(),
        "log_laplace_at_zero": m.log_laplace(0.0)?,
    });
    Ok((out, vec![], 0.0))
}

fn tilt_rho(a: &ModelAnalytics, tilt: Tilt) -> Result<f64, ExperimentError> {
    let missing = |name: &str| ExperimentError::Invalid(format!("{name} is undefined for a {:?} model", a.regime));
    match tilt {
        Tilt::Star => Ok(a.rho_star),
        Tilt::Plus => a.rho_plus.ok_or_else(|| missing("rho_plus")),
        Tilt::Minus => a.rho_minus.ok_or_else(|| missing("rho_minus")),
    }
}

/// `C_R` of a closed-form lattice renewal function.
pub fn exact_c_r(r: &RenewalFn) -> Option<f64> {
    match r {
        RenewalFn::Lattice { h, r } if *r == 1.0 => Some(1.0 / h),
        RenewalFn::Lattice { r, .. } => Some(1.0 / (1.0 - r)),
        RenewalFn::Table { .. } => None,
    }
}

fn estimate_json(e: &EstimateWithCI, ess: f64, truncated: u64) -> Value {
    json!({
        "estimate": e.value,
        "stderr": e.stderr,
        "effective_sample_size": ess,
        "replicas": e.replicas,
        "truncated_count": truncated,
        "detail": e,
    })
}

#[allow(clippy::too_many_arguments)]
fn walk_command(
    m: &ModelSpec,
    tilt: Tilt,
    op: WalkOp,
    x: f64,
    t: f64,
    replicas: u64,
    max_steps: u64,
    grid: Option<&[f64]>,
    method: Option<RenewalMethod>,
    steps: usize,
    plan: &Plan,
) -> Result<Parts, ExperimentError> {
    let a = m.analyze()?;
    let walk = TiltedWalk::new(m, tilt_rho(&a, tilt)?).map_err(run_err)?;
    let exact = RenewalFn::exact(&walk);
    match op {
        WalkOp::Renewal => {
            let grid: Vec<f64> = match grid {
                Some(g) => g.to_vec(),
                None => (0..=10).map(|i| t * i as f64 / 10.0).collect(),
            };
            let method = method.unwrap_or(RenewalMethod::LadderDuality);
            let r = renewal_function(&walk, &grid, replicas, method, max_steps, plan).map_err(run_err)?;
            let mut csv = String::from("x,r,stderr,monotone,exact\n");
            for (i, x) in r.x_grid.iter().enumerate() {
                let ex = exact.as_ref().map(|e| e.eval(*x).to_string()).unwrap_or_default();
                csv.push_str(&format!("{x},{},{},{},{ex}\n", r.r_values[i].value, r.r_values[i].stderr, r.monotone[i]));
            }
            let truncated = r.r_values.first().map_or(0, |e| e.truncated);
            let out = json!({
                "estimate": r.r_values.last().map(|e| e.value),
                "stderr": r.r_values.last().map(|e| e.stderr),
                "replicas": replicas,
                "truncated_count": truncated,
                "renewal": r,
                "exact": exact.as_ref().map(|e| grid.iter().map(|x| e.eval(*x)).collect::<Vec<_>>()),
            });
            Ok((out, vec![("renewal.csv".into(), csv)], truncated as f64 / replicas as f64))
        }
        WalkOp::Cr => {
            let r = estimate_C_R(&walk, replicas, t, max_steps, plan).map_err(run_err)?;
            let tf = r.c_r.truncated_fraction;
            let mut out = estimate_json(&r.c_r, r.c_r.n_effective, r.c_r.truncated);
            out["exact"] = json!(exact.as_ref().and_then(exact_c_r));
            out["report"] = json!(r);
            Ok((out, vec![], tf))
        }
        WalkOp::Passage => {
            let p = passage_probability(&walk, x, t, replicas, max_steps, plan);
            let oracle = enumerate_walk_functional(&walk, x, WalkFunctional::Passage { t }).ok();
            let mut out = estimate_json(&p, p.n_effective, p.truncated);
            out["exact"] = json!(oracle.map(|o| o.value));
            if let Some(c) = exact.as_ref().and_then(exact_c_r) {
                let scale = if walk.is_centered() { t } else { 1.0 };
                out["scaled"] = json!(p.scale(c * scale));
            }
            Ok((out, vec![], p.truncated_fraction))
        }
        WalkOp::Tanaka => {
            let (acc, positive, truncated) = plan.sub("tanaka").fold(
                replicas,
                TanakaScratch::default,
                || (MeanAcc::new(), 0u64, 0u64),
                |(acc, pos, tr), scratch, _, rng| match tanaka_into(&walk, steps, max_steps, rng, scratch) {
                    Ok(_) => {
                        let z = &scratch.positions;
                        acc.push(z[steps]);
                        *pos += z.iter().skip(1).all(|v| *v > 0.0) as u64;
                    }
                    Err(_) => *tr += 1,
                },
                |a, b| {
                    a.0.merge(&b.0);
                    a.1 += b.1;
                    a.2 += b.2;
                },
            );
            let e = EstimateWithCI::from_mean(&acc, truncated);
            let mut out = estimate_json(&e, e.n_effective, truncated);
            out["steps"] = json!(steps);
            out["positive_paths"] = json!(positive);
            Ok((out, vec![], e.truncated_fraction))
        }
        WalkOp::Overshoot => {
            let e = overshoot_mean(&walk, t, replicas, max_steps, plan).map_err(run_err)?;
            Ok((estimate_json(&e, e.n_effective, e.truncated), vec![], e.truncated_fraction))
        }
    }
}

fn many21(m: &ModelSpec, rho: f64, x: f64, depth: usize, replicas: u64, plan: &Plan) -> Result<Parts, ExperimentError> {
    let mut rows = Vec::new();
    for n in 1..=depth.max(1) {
        let count = many_to_one_estimate(m, rho, x, n, |_| 1.0, replicas, &plan.sub(&format!("count{n}")))?;
        let alive = many_to_one_estimate(m, rho, x, n, alive_indicator, replicas, &plan.sub(&format!("alive{n}")))?;
        for (f, e, functional) in
            [("one", count, TreeFunctional::Count { n }), ("alive", alive, TreeFunctional::AliveCount { n })]
        {
            let exact = enumerate_tree_expectation(m, x, functional).ok();
            rows.push(json!({
                "n": n,
                "f": f,
                "estimate": e.value,
                "stderr": e.stderr,
                "exact": exact,
                "z": exact.map(|v| e.z_score(v)),
            }));
        }
    }
    let last = rows.last().cloned().unwrap_or(Value::Null);
    let out = json!({
        "estimate": last["estimate"],
        "stderr": last["stderr"],
        "effective_sample_size": replicas,
        "truncated_count": 0,
        "rows": rows,
    });
    Ok((out, vec![], 0.0))
}

fn survival_csv(t: &TreeSurvival) -> String {
    let mut csv = String::from("n,survival_z,stderr_z,survival_leaves,stderr_leaves,exceed_z,exceed_leaves,flagged\n");
    let (z, l) = (t.z.curve(), t.leaves.curve());
    for i in 0..z.grid.len() {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            z.grid[i],
            z.survival[i].value,
            z.survival[i].stderr,
            l.survival[i].value,
            l.survival[i].stderr,
            z.exceedances[i],
            l.exceedances[i],
            (z.flagged[i] || l.flagged[i]) as u8
        ));
    }
    csv
}

fn survival_json(t: &TreeSurvival) -> Value {
    json!({
        "z": t.z.curve(),
        "leaves": t.leaves.curve(),
        "coupling_ratio": t.coupling_ratio(),
    })
}

fn estimate_command(
    m: &ModelSpec,
    records: &Path,
    mode: Option<TailMode>,
    grid: Option<&[u64]>,
    range: (f64, f64),
    constants_replicas: u64,
    plan: &Plan,
) -> Result<Parts, ExperimentError> {
    let a = m.analyze()?;
    let text = fs::read(records).map_err(|e| IoError::Schema {
        path: "command.records".into(),
        message: format!("{}: {e}", records.display()),
    })?;
    let table = read_tree_rows(text.as_slice())?;
    let grid: Vec<u64> = match grid {
        Some(g) => g.to_vec(),
        None => power_of_two_grid(range.0.max(1.0).floor() as u64, range.1.ceil() as u64),
    };
    let mut tails = TreeSurvival::new(&grid, m.mean_offspring(), 1.0);
    for r in &table.rows {
        tails.push(r.z, r.leaves, r.truncated);
    }
    let mode = mode.unwrap_or(match a.regime {
        Regime::Critical => TailMode::CriticalPlateau,
        _ => TailMode::SubcriticalSlope,
    });
    let fit = |c| match tail_fit(c, mode, range, a.tail_exponent()) {
        Ok(r) => json!(r),
        Err(e) => json!({ "error": e.to_string() }),
    };
    let (zc, lc) = (tails.z.curve(), tails.leaves.curve());
    let mut out = json!({
        "mode": mode,
        "records": table.rows.len(),
        "truncated": tails.z.truncated,
        "z_fit": fit(&zc),
        "leaves_fit": fit(&lc),
        "coupling_ratio": tails.coupling_ratio(),
    });
    if constants_replicas > 0 && a.regime != Regime::OutOfScope {
        let k = estimate_constants(m, a.regime, constants_replicas, 1_000_000, plan).map_err(run_err)?;
        out["constants"] = json!(k);
    }
    let tf = tails.z.truncated as f64 / (table.rows.len().max(1)) as f64;
    Ok((out, vec![("tail.csv".into(), tail_csv(&zc, &lc))], tf))
}

fn tail_csv(z: &crate::stats::SurvivalCurve, l: &crate::stats::SurvivalCurve) -> String {
    let mut csv = String::from("n,survival,normalized,survival_leaves,normalized_leaves\n");
    for i in 0..z.grid.len() {
        let n = z.grid[i];
        let norm = n * n.ln().powi(2);
        csv.push_str(&format!(
            "{n},{},{},{},{}\n",
            z.survival[i].value,
            z.survival[i].value * norm,
            l.survival[i].value,
            l.survival[i].value * norm
        ));
    }
    csv
}

/// One row of a run report.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CriterionRow {
    pub criterion: u32,
    pub title: String,
    /// `pass`, `fail`, `insufficient` (consistent but below budget) or `no-data`.
    pub status: String,
    pub evidence: String,
}

fn summaries(dir: &Path, out: &mut Vec<(PathBuf, String, Value)>) -> Result<(), IoError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            summaries(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "summary.json") {
            let text = fs::read_to_string(&p)?;
            if let Ok(v) = serde_json::from_str::<Value>(&text) {
                out.push((p, text, v));
            }
        }
    }
    Ok(())
}

const TITLES: [&str; 12] = [
    "exploration identity",
    "oracle equivalence",
    "many-to-one",
    "martingale means",
    "renewal machinery",
    "first-passage asymptotics",
    "conditioned-walk consistency",
    "survival asymptotics",
    "subcritical tail slope",
    "critical tail plateau",
    "convolution tail",
    "reproducibility",
];

/// Evaluates the criteria that the summaries under `run_dir` bear on.
pub fn report(run_dir: &Path) -> Result<Vec<CriterionRow>, ExperimentError> {
    let mut found = Vec::new();
    if !run_dir.is_dir() {
        return Err(IoError::Schema {
            path: "command.run_dir".into(),
            message: format!("{} is not a directory", run_dir.display()),
        }
        .into());
    }
    summaries(run_dir, &mut found)?;
    let mut rows: Vec<CriterionRow> = TITLES
        .iter()
        .enumerate()
        .map(|(i, t)| CriterionRow {
            criterion: i as u32 + 1,
            title: t.to_string(),
            status: "no-data".into(),
            evidence: String::new(),
        })
        .collect();
    let (mut holds, mut fails, mut trees) = (0u64, 0u64, 0u64);
    let mut survival_probes: Vec<(String, f64, f64, Value)> = Vec::new();
    let mut by_hash: std::collections::BTreeMap<String, Vec<(u64, String)>> = Default::default();
    for (path, text, v) in &found {
        let cmd = &v["command"];
        let result = &v["result"];
        if let Some(manifest) = path.parent().map(|p| p.join("MANIFEST.json")) {
            if let Ok(mt) = fs::read_to_string(manifest) {
                if let Ok(mv) = serde_json::from_str::<Value>(&mt) {
                    if let (Some(h), Some(w)) = (mv["config_hash"].as_str(), mv["workers"].as_u64()) {
                        by_hash.entry(h.to_string()).or_default().push((w, text.clone()));
                    }
                }
            }
        }
        match cmd["name"].as_str().unwrap_or("") {
            "simulate" => {
                let f = &result["forward"];
                holds += f["exploration_holds"].as_u64().unwrap_or(0);
                fails += f["exploration_fails"].as_u64().unwrap_or(0);
                trees += f["replicas"].as_u64().unwrap_or(0);
            }
            "spine" => match cmd["op"].as_str().unwrap_or("") {
                "many21" => {
                    let zs: Vec<f64> =
                        result["rows"].as_array().into_iter().flatten().filter_map(|r| r["z"].as_f64()).collect();
                    if !zs.is_empty() {
                        let worst = zs.iter().copied().fold(0.0, f64::max);
                        mark(&mut rows, 3, worst <= 4.0, format!("{} comparisons, max |z| = {worst:.2}", zs.len()));
                    }
                }
                "survival" => {
                    if let (Some(x), Some(t)) = (cmd["x"].as_f64(), cmd["t"].as_f64()) {
                        survival_probes.push((v["model"].to_string(), x, t, result["scaled"].clone()));
                    }
                }
                _ => {}
            },
            "walk" => {
                let est = result["estimate"].as_f64();
                match cmd["op"].as_str().unwrap_or("") {
                    "cr" => {
                        if let (Some(e), Some(x)) = (est, result["exact"].as_f64()) {
                            let rel = (e / x - 1.0).abs();
                            mark(&mut rows, 5, rel <= 0.02, format!("C_R {e:.4} vs {x:.6} ({:.2}%)", 100.0 * rel));
                        }
                    }
                    "passage" => {
                        if let Some(s) = result["scaled"]["value"].as_f64() {
                            mark(
                                &mut rows,
                                6,
                                (0.9..=1.1).contains(&s),
                                format!("scaled passage {s:.4} at t = {}", cmd["t"]),
                            );
                        }
                    }
                    _ => {}
                }
            }
            "estimate" => {
                let fit = &result["z_fit"];
                match result["mode"].as_str() {
                    Some("subcritical_slope") => {
                        if let (Some(s), Some(r)) = (fit["fitted"]["value"].as_f64(), fit["reference"].as_f64()) {
                            let rel = (s / r - 1.0).abs();
                            mark(&mut rows, 9, rel <= 0.15, format!("slope {s:.3} vs {r:.5} ({:.1}%)", 100.0 * rel));
                        }
                    }
                    Some("critical_plateau") => {
                        if let Some(d) = fit["diagnostic"].as_f64() {
                            let mut ok = d <= 2.0;
                            let mut ev = format!("top-decade max/min {d:.3}");
                            let plateau = result["leaves_fit"]["fitted"]["value"].as_f64();
                            if let (Some(p), Some(c)) = (plateau, result["constants"]["c_crit"]["value"].as_f64()) {
                                let ratio = p / c;
                                ok &= (0.5..=2.0).contains(&ratio);
                                ev.push_str(&format!(", plateau/c_crit {ratio:.3}"));
                            }
                            mark(&mut rows, 10, ok, ev);
                        }
                    }
                    _ => {}
                }
            }
            _ => {}
        }
    }
    if holds + fails > 0 {
        mark(&mut rows, 1, fails == 0, format!("{holds} trees hold, {fails} fail, {trees} simulated"));
        if fails == 0 && trees < 1_000_000 {
            rows[0].status = "insufficient".into();
        }
    }
    survival_probes.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.total_cmp(&b.2)));
    for (i, p) in survival_probes.iter().enumerate() {
        for q in &survival_probes[i + 1..] {
            if p.0 == q.0 && p.1 == q.1 && (q.2 - 2.0 * p.2).abs() < 1e-9 {
                if let (Some(a), Some(b)) = (p.3["value"].as_f64(), q.3["value"].as_f64()) {
                    let ratio = a / b;
                    mark(
                        &mut rows,
                        8,
                        (2.0 / 3.0..=1.5).contains(&ratio),
                        format!("scaled survival ratio t = {}: {ratio:.3}", p.2),
                    );
                }
            }
        }
    }
    for runs in by_hash.values() {
        let workers: std::collections::BTreeSet<u64> = runs.iter().map(|r| r.0).collect();
        if workers.len() > 1 {
            let same = runs.windows(2).all(|w| w[0].1 == w[1].1);
            mark(
                &mut rows,
                12,
                same,
                format!("workers {workers:?}: summaries {}", if same { "identical" } else { "differ" }),
            );
        }
    }
    Ok(rows)
}

fn mark(rows: &mut [CriterionRow], k: usize, ok: bool, evidence: String) {
    let row = &mut rows[k - 1];
    if row.status != "fail" {
        row.status = if ok { "pass" } else { "fail" }.into();
    }
    if !row.evidence.is_empty() {
        row.evidence.push_str("; ");
    }
    row.evidence.push_str(&evidence);
}

fn report_csv(rows: &[CriterionRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
}
