//! Runs a scenario × controller matrix and writes its artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use ccbf_core::scenarios::{compute_metrics, run_simulation};
use ccbf_core::{ControllerKind, Metrics, Outcome, Scenario};
use rayon::prelude::*;

use crate::config::{RunConfig, ScenarioParams};
use crate::plot::run_plots;
use crate::table::{fmt_float, to_csv, Table};

/// Exit codes of `ccbf run`.
pub const EXIT_PASS: u8 = 0;
pub const EXIT_ACCEPTANCE: u8 = 1;
pub const EXIT_IO: u8 = 2;

#[derive(Debug, Clone)]
pub struct RunReport {
    pub run_id: String,
    pub scenario_id: String,
    pub controller: String,
    /// Adaptive runs are gated; baselines are informational.
    pub gated: bool,
    pub metrics: Metrics,
    pub failures: Vec<String>,
    pub io_error: Option<String>,
}

impl RunReport {
    pub fn verdict(&self) -> &'static str {
        match (self.gated, self.failures.is_empty()) {
            (false, _) => "info",
            (true, true) => "pass",
            (true, false) => "fail",
        }
    }
}

#[derive(Debug)]
pub struct MatrixReport {
    pub runs: Vec<RunReport>,
    pub out: PathBuf,
    pub io_errors: Vec<String>,
}

impl MatrixReport {
    pub fn exit_code(&self) -> u8 {
        if !self.io_errors.is_empty() {
            EXIT_IO
        } else if self.runs.iter().any(|r| r.verdict() == "fail") {
            EXIT_ACCEPTANCE
        } else {
            EXIT_PASS
        }
    }
}

/// Scenario invariants an adaptive run must satisfy.
pub fn invariant_failures(params: &ScenarioParams, sc: &Scenario, m: &Metrics) -> Vec<String> {
    let mut out = Vec::new();
    if m.outcome != Outcome::Completed {
        out.push(format!("outcome {}", m.outcome));
    }
    if m.feasible_fraction < 1.0 {
        out.push(format!("feasible fraction {:.4}", m.feasible_fraction));
    }
    let a = &sc.adaptation;
    if !(m.min_w >= a.w_min && m.max_w <= a.w_max) {
        out.push(format!("weights left [{}, {}]", a.w_min, a.w_max));
    }
    for (i, (u, bound)) in m.max_abs_u.iter().zip(sc.system.u_max()).enumerate() {
        if !(*u <= bound * (1.0 + 1e-9)) {
            out.push(format!("|u_{i}| reached {u:.4} > {bound}"));
        }
    }
    match params {
        ScenarioParams::OneDim(p) => {
            if let Some((i, h)) = m.min_h.iter().enumerate().find(|(_, h)| !(**h > 0.0)) {
                out.push(format!("min h_{i} = {h:.4e}"));
            }
            if !(m.max_abs_x0 < p.p) {
                out.push(format!("max |x| = {:.5} reached the well edge {}", m.max_abs_x0, p.p));
            }
            if !(m.min_big_h >= 0.0) {
                out.push(format!("min H = {:.4e}", m.min_big_h));
            }
            if !(m.max_b_ccbf <= 1e-9) {
                out.push(format!("max b_ccbf = {:.4e}", m.max_b_ccbf));
            }
        }
        ScenarioParams::Bicycle(_) => {
            if let Some((i, h)) = m.min_h.iter().enumerate().find(|(_, h)| !(**h >= 0.0)) {
                out.push(format!("min h_{i} = {h:.4e}"));
            }
        }
    }
    out
}

fn write_run_files(out: &Path, run_id: &str, log: &ccbf_core::SimLog) -> Result<(), String> {
    let bytes = to_csv(log).map_err(|e| format!("{run_id}.csv: {e}"))?;
    let csv_path = out.join(format!("{run_id}.csv"));
    fs::write(&csv_path, &bytes).map_err(|e| format!("{}: {e}", csv_path.display()))?;
    // Plots are drawn from the serialized CSV, not from the in-memory log.
    let table = Table::from_csv(&bytes).map_err(|e| format!("{run_id}.csv: {e}"))?;
    for (suffix, svg) in run_plots(run_id, &table) {
        let path = out.join(format!("{run_id}_{suffix}.svg"));
        fs::write(&path, svg).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    Ok(())
}

fn run_one(params: &ScenarioParams, controller: &ControllerKind, seed: u64, out: &Path) -> RunReport {
    let sc = params.build();
    let log = run_simulation(&sc, controller, seed);
    let metrics = compute_metrics(&log, &sc);
    let gated = controller.adapts();
    let failures = if gated { invariant_failures(params, &sc, &metrics) } else { Vec::new() };
    let run_id = format!("{}__{}", sc.id, controller.id());
    let io_error = write_run_files(out, &run_id, &log).err();
    RunReport { run_id, scenario_id: sc.id.clone(), controller: controller.id(), gated, metrics, failures, io_error }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), fmt_float)
}

pub fn summary_csv(runs: &[RunReport], seed: u64) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "run",
        "scenario",
        "controller",
        "seed",
        "verdict",
        "outcome",
        "records",
        "min_h",
        "min_H",
        "max_b_ccbf",
        "feasible_fraction",
        "first_infeasible",
        "goal_distance",
        "max_abs_x_0",
        "max_abs_eta_mu_margin",
        "max_abs_eta_nu_margin",
        "min_eig_phi",
        "min_w",
        "max_w",
        "input_total_variation",
        "failures",
    ])?;
    for r in runs {
        let m = &r.metrics;
        let min_h = m.min_h.iter().copied().fold(f64::INFINITY, f64::min);
        w.write_record([
            r.run_id.clone(),
            r.scenario_id.clone(),
            r.controller.clone(),
            seed.to_string(),
            r.verdict().into(),
            m.outcome.to_string(),
            m.steps.to_string(),
            fmt_float(min_h),
            fmt_float(m.min_big_h),
            fmt_float(m.max_b_ccbf),
            fmt_float(m.feasible_fraction),
            opt(m.first_infeasible),
            opt(m.goal_distance),
            fmt_float(m.max_abs_x0),
            fmt_float(m.max_abs_eta_mu),
            fmt_float(m.max_abs_eta_nu),
            fmt_float(m.min_min_eig),
            fmt_float(m.min_w),
            fmt_float(m.max_w),
            fmt_float(m.input_total_variation),
            r.failures.join("; "),
        ])?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

/// Human-readable table for the terminal.
pub fn summary_table(runs: &[RunReport]) -> String {
    let width = runs.iter().map(|r| r.run_id.len()).max().unwrap_or(3).max(3);
    let mut s = format!("{:<width$}  {:<7} {:<28} {:>10} {:>9}\n", "run", "verdict", "outcome", "min h", "feasible");
    for r in runs {
        let min_h = r.metrics.min_h.iter().copied().fold(f64::INFINITY, f64::min);
        s += &format!(
            "{:<width$}  {:<7} {:<28} {:>10.4} {:>9.3}\n",
            r.run_id,
            r.verdict(),
            r.metrics.outcome.to_string(),
            min_h,
            r.metrics.feasible_fraction
        );
    }
    let failed: Vec<&RunReport> = runs.iter().filter(|r| r.verdict() == "fail").collect();
    if !failed.is_empty() {
        s += "\nfailures:\n";
        for r in failed {
            s += &format!("  {}: {}\n", r.run_id, r.failures.join("; "));
        }
    }
    s
}

/// Executes every scenario × controller pair on up to `jobs` threads
/// (`None` lets rayon decide), writes one CSV and four SVGs per run, then
/// the summary once all runs have joined.
pub fn run_matrix(cfg: &RunConfig, jobs: Option<usize>, out: &Path) -> MatrixReport {
    let mut report = MatrixReport { runs: Vec::new(), out: out.to_path_buf(), io_errors: Vec::new() };
    if let Err(e) = fs::create_dir_all(out) {
        report.io_errors.push(format!("{}: {e}", out.display()));
        return report;
    }
    let pairs: Vec<(&ScenarioParams, &ControllerKind)> =
        cfg.scenarios.iter().flat_map(|p| cfg.controllers.iter().map(move |c| (p, c))).collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        builder = builder.num_threads(n.max(1));
    }
    let pool = match builder.build() {
        Ok(pool) => pool,
        Err(e) => {
            report.io_errors.push(format!("thread pool: {e}"));
            return report;
        }
    };
    report.runs = pool.install(|| pairs.par_iter().map(|(p, c)| run_one(p, c, cfg.seed, out)).collect());
    report.io_errors.extend(report.runs.iter().filter_map(|r| r.io_error.clone()));

    let summary = out.join("summary.csv");
    match summary_csv(&report.runs, cfg.seed) {
        Ok(bytes) => {
            if let Err(e) = fs::write(&summary, bytes) {
                report.io_errors.push(format!("{}: {e}", summary.display()));
            }
        }
        Err(e) => report.io_errors.push(format!("summary: {e}")),
    }
    report
}
