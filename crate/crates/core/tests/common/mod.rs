//! Scenario runs and criterion checks shared by the integration targets.

#![allow(dead_code)]
// `!(a >= b)` is deliberate throughout: NaN must fail a check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod oracles;

use std::f64::consts::PI;
use std::thread;

use ccbf_core::scenarios::{
    build_scenario_1d, build_scenario_bicycle, compute_metrics, run_simulation, ECBF_GAIN_SCHEDULE,
};
use ccbf_core::{ControllerKind, Metrics, Outcome, Scenario, SimLog};

pub const GAMMAS: [f64; 3] = [0.01, 0.1, 1.0];
pub const THETAS: [f64; 2] = [0.0, PI];
/// Edge of the potential wells of the 1-D plant.
pub const WELL_EDGE: f64 = 1.5616;
pub const ETA: f64 = 0.05;

pub struct Run {
    pub scenario: Scenario,
    pub log: SimLog,
    pub metrics: Metrics,
}

impl Run {
    pub fn new(scenario: Scenario, kind: &ControllerKind) -> Self {
        let log = run_simulation(&scenario, kind, 0);
        let metrics = compute_metrics(&log, &scenario);
        Self { scenario, log, metrics }
    }
}

/// The six C-CBF runs of the 1-D study, ordered `γ`-major.
pub fn one_dim_matrix() -> Vec<Run> {
    let cases: Vec<(f64, f64)> = GAMMAS.iter().flat_map(|g| THETAS.iter().map(move |th| (*g, *th))).collect();
    thread::scope(|s| {
        let handles: Vec<_> = cases
            .iter()
            .map(|&(g, th)| s.spawn(move || Run::new(build_scenario_1d(g, th), &ControllerKind::CcbfQp)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("run thread")).collect()
    })
}

pub fn bicycle_ccbf() -> Run {
    Run::new(build_scenario_bicycle(), &ControllerKind::CcbfQp)
}

pub fn bicycle_baselines() -> Vec<Run> {
    thread::scope(|s| {
        let handles: Vec<_> = ECBF_GAIN_SCHEDULE
            .iter()
            .map(|g| s.spawn(move || Run::new(build_scenario_bicycle(), &ControllerKind::EcbfQp(*g))))
            .collect();
        handles.into_iter().map(|h| h.join().expect("run thread")).collect()
    })
}

pub type Verdict = Result<String, String>;

fn collect(failures: Vec<String>, ok: String) -> Verdict {
    if failures.is_empty() {
        Ok(ok)
    } else {
        Err(failures.join("; "))
    }
}

pub fn one_dim_safety(runs: &[Run]) -> Verdict {
    let mut failures = Vec::new();
    let mut worst_x: f64 = 0.0;
    for r in runs {
        let m = &r.metrics;
        let id = &r.scenario.id;
        let mut fail = |what: String| failures.push(format!("{id}: {what}"));
        if m.outcome != Outcome::Completed {
            fail(format!("outcome {}", m.outcome));
        }
        if m.steps != r.scenario.steps() + 1 {
            fail(format!("{} records", m.steps));
        }
        if !(m.min_h[0] > 0.0 && m.min_h[1] > 0.0) {
            fail(format!("min h = {:?}", m.min_h));
        }
        if !(m.max_abs_x0 < WELL_EDGE) {
            fail(format!("max |x| = {}", m.max_abs_x0));
        }
        if !(m.max_abs_u[0] <= 1.0) {
            fail(format!("max |u| = {}", m.max_abs_u[0]));
        }
        if !(m.min_big_h >= 0.0) {
            fail(format!("min H = {}", m.min_big_h));
        }
        if !(m.max_b_ccbf <= 1e-9) {
            fail(format!("max b = {}", m.max_b_ccbf));
        }
        worst_x = worst_x.max(m.max_abs_x0);
    }
    collect(failures, format!("6 runs completed, max |x| = {worst_x:.5} < {WELL_EDGE}"))
}

fn find(runs: &[Run], gamma: f64, theta: f64) -> &Run {
    runs.iter()
        .find(|r| {
            let p = &r.scenario.id;
            p == &build_scenario_1d(gamma, theta).id
        })
        .expect("run present")
}

pub fn one_dim_symmetry(runs: &[Run]) -> Verdict {
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for g in GAMMAS {
        let (a, b) = (&find(runs, g, 0.0).log.records, &find(runs, g, PI).log.records);
        if a.len() != b.len() {
            failures.push(format!("gamma {g}: {} vs {} records", a.len(), b.len()));
            continue;
        }
        let gap = a.iter().zip(b).map(|(p, q)| (p.x[0] + q.x[0]).abs()).fold(0.0, f64::max);
        worst = worst.max(gap);
        if gap > 1e-6 {
            failures.push(format!("gamma {g}: max |x_pi + x_0| = {gap:e}"));
        }
    }
    collect(failures, format!("max |x_pi + x_0| = {worst:.2e}"))
}

pub fn one_dim_ordering(runs: &[Run]) -> Verdict {
    let mut failures = Vec::new();
    let mut rows = Vec::new();
    for th in THETAS {
        let xs: Vec<f64> = GAMMAS.iter().map(|g| find(runs, *g, th).metrics.max_abs_x0).collect();
        for (i, pair) in xs.windows(2).enumerate() {
            if !(pair[1] - pair[0] >= 1e-3) {
                failures.push(format!(
                    "theta {th:.3}: gamma {} -> {} gives {} -> {}",
                    GAMMAS[i],
                    GAMMAS[i + 1],
                    pair[0],
                    pair[1]
                ));
            }
        }
        rows.push(format!("{:.4}/{:.4}/{:.4}", xs[0], xs[1], xs[2]));
    }
    collect(failures, format!("max |x| by gamma: {}", rows.join(", ")))
}

pub fn bicycle_safety(run: &Run) -> Verdict {
    let m = &run.metrics;
    let a = &run.scenario.adaptation;
    let mut failures = Vec::new();
    if m.outcome != Outcome::Completed {
        failures.push(format!("outcome {}", m.outcome));
    }
    let last_t = run.log.records.last().map_or(0.0, |r| r.t);
    if last_t < run.scenario.horizon - 1e-9 {
        failures.push(format!("logged only up to t = {last_t:.2}"));
    }
    if let Some((i, h)) = m.min_h.iter().enumerate().find(|(_, h)| !(**h >= 0.0)) {
        failures.push(format!("min h{} = {h:.4}", i + 1));
    }
    if m.feasible_fraction < 1.0 {
        failures.push(format!("feasible fraction {:.3}", m.feasible_fraction));
    }
    if !(m.min_w >= a.w_min && m.max_w <= a.w_max) {
        failures.push(format!("weights in [{:.3}, {:.3}]", m.min_w, m.max_w));
    }
    let goal = m.goal_distance.map_or("n/a".into(), |d| format!("{d:.3} m"));
    collect(failures, format!("all constraints held, goal distance {goal}"))
}

/// Convexity floor and filter margins at every logged step of the given runs.
pub fn monitors(runs: &[&Run]) -> Verdict {
    let mut failures = Vec::new();
    let mut worst_mu: f64 = 0.0;
    let mut worst_nu: f64 = 0.0;
    let mut min_eig = f64::INFINITY;
    for r in runs {
        let floor = r.scenario.adaptation.convexity_floor;
        let m = &r.metrics;
        worst_mu = worst_mu.max(m.max_abs_eta_mu);
        worst_nu = worst_nu.max(m.max_abs_eta_nu);
        min_eig = min_eig.min(m.min_min_eig);
        if !(m.min_min_eig >= floor) {
            failures.push(format!("{}: min eig {:e} < {floor:e}", r.scenario.id, m.min_min_eig));
        }
        if !(m.max_abs_eta_mu <= ETA && m.max_abs_eta_nu <= ETA) {
            failures.push(format!(
                "{}: filter margins ({:.3e}, {:.3e}) exceed {ETA}",
                r.scenario.id, m.max_abs_eta_mu, m.max_abs_eta_nu
            ));
        }
        if r.metrics.outcome != Outcome::Completed {
            failures.push(format!("{}: monitored only until {}", r.scenario.id, r.metrics.outcome));
        }
    }
    collect(
        failures,
        format!("min eig {min_eig:.3}, max |margin| ({worst_mu:.2e}, {worst_nu:.2e}) <= {ETA}"),
    )
}

pub fn baselines_detect_infeasibility(runs: &[Run]) -> Verdict {
    let outcomes: Vec<String> = runs.iter().map(|r| r.metrics.outcome.to_string()).collect();
    let detected = runs.iter().any(|r| {
        matches!(r.metrics.outcome, Outcome::ControllerInfeasible { .. })
            && r.metrics.first_infeasible.is_some()
            && r.metrics.goal_distance.is_some_and(|d| d > r.scenario.goal.map_or(0.0, |g| g.radius))
    });
    let logged = runs.iter().all(|r| r.log.records.len() == r.scenario.steps() + 1);
    if detected && logged {
        Ok(format!("E-CBF outcomes: {}", outcomes.join(", ")))
    } else {
        Err(format!("E-CBF outcomes: {} (full logs: {logged})", outcomes.join(", ")))
    }
}
