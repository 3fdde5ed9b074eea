//! Closed-loop behaviour of the two case studies.

mod common;

use ccbf_core::scenarios::{build_scenario_1d, build_scenario_bicycle, compute_metrics, run_simulation};
use ccbf_core::{ControllerKind, Outcome};
use common::{
    baselines_detect_infeasibility, bicycle_baselines, bicycle_ccbf, monitors, one_dim_matrix, one_dim_ordering,
    one_dim_safety, one_dim_symmetry,
};

#[test]
fn one_dim_study() {
    let runs = one_dim_matrix();
    assert_eq!(runs.len(), 6);
    one_dim_safety(&runs).unwrap();
    one_dim_symmetry(&runs).unwrap();
    one_dim_ordering(&runs).unwrap();
    monitors(&runs.iter().collect::<Vec<_>>()).unwrap();
}

#[test]
fn one_dim_logs_have_one_record_per_step() {
    let sc = build_scenario_1d(0.1, 0.0);
    let log = run_simulation(&sc, &ControllerKind::CcbfQp, 7);
    assert_eq!(log.records.len(), sc.steps() + 1);
    assert_eq!(log.seed, 7);
    assert!(log.records.windows(2).all(|p| p[1].t > p[0].t));
    assert!((log.records.last().unwrap().t - sc.horizon).abs() < 1e-9);
}

#[test]
fn one_dim_runs_are_deterministic() {
    let sc = build_scenario_1d(1.0, 0.0);
    let a = run_simulation(&sc, &ControllerKind::CcbfQp, 0);
    let b = run_simulation(&sc, &ControllerKind::CcbfQp, 0);
    assert_eq!(a.records, b.records);
}

#[test]
fn one_dim_flow_controller_stays_safe() {
    let sc = build_scenario_1d(0.1, 0.0);
    let log = run_simulation(&sc, &ControllerKind::CcbfFlow, 0);
    let m = compute_metrics(&log, &sc);
    assert!(m.min_h.iter().all(|h| *h > 0.0), "{m:?}");
    assert!(m.max_abs_u[0] <= 1.0);
}

#[test]
fn baselines_report_infeasibility_without_crashing() {
    let runs = bicycle_baselines();
    baselines_detect_infeasibility(&runs).unwrap();
    // Conservative gains give up first.
    let first = |i: usize| runs[i].metrics.first_infeasible.unwrap_or(f64::INFINITY);
    assert!(first(0) < 1.0, "most conservative gains infeasible at {}", first(0));
}

#[test]
fn bicycle_nominal_alone_ignores_obstacles() {
    let sc = build_scenario_bicycle();
    let log = run_simulation(&sc, &ControllerKind::NominalOnly, 0);
    let m = compute_metrics(&log, &sc);
    assert_eq!(m.outcome, Outcome::Completed);
    assert!(m.min_h[..5].iter().any(|h| *h < 0.0), "straight line crosses an obstacle: {:?}", m.min_h);
}

/// The adaptive run either completes or stops with a recorded reason; a
/// broken adaptation premise never aborts the process.
#[test]
fn bicycle_ccbf_run_ends_with_an_outcome() {
    let run = bicycle_ccbf();
    let last = run.log.records.last().expect("at least the initial record");
    match &run.metrics.outcome {
        Outcome::Completed => assert_eq!(run.log.records.len(), run.scenario.steps() + 1),
        Outcome::AdaptationFailed { t, reason } => {
            assert!(!reason.is_empty());
            assert!((last.t - t).abs() < 1e-9 || last.t < *t);
        }
        other => panic!("unexpected outcome {other}"),
    }
}
