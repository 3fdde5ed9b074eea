//! Benchmark fixtures; the benches themselves live in `benches/`.

use ccbf_core::scenarios::{build_scenario_1d, build_scenario_bicycle};
use ccbf_core::{QpRow, Scenario, WeightState};

/// A scenario with its initial state and a weight state at the initialized
/// weights, ready for one adaptation evaluation.
pub struct Fixture {
    pub scenario: Scenario,
    pub t: f64,
    pub x: Vec<f64>,
    pub ws: WeightState,
}

impl Fixture {
    pub fn new(scenario: Scenario) -> Self {
        let x = scenario.x0.clone();
        let ctx = scenario.context();
        let guess = scenario.weight_state(scenario.w_guess.clone());
        let w = ccbf_core::adaptation::initialize_weights(
            &scenario.w_guess,
            &guess,
            &ctx,
            0.0,
            &x,
            scenario.adaptation.init_horizon,
        )
        .expect("initial weights");
        let ws = scenario.weight_state(w);
        Self { scenario, t: 0.0, x, ws }
    }

    pub fn one_dim() -> Self {
        Self::new(build_scenario_1d(0.1, 0.0))
    }

    pub fn bicycle() -> Self {
        Self::new(build_scenario_bicycle())
    }
}

/// Two-input box QP with the nominal outside the box and a binding row.
pub fn box_qp_instance() -> ([f64; 2], [f64; 2], [f64; 2], Vec<QpRow>) {
    let rows = vec![QpRow::new(0.5, vec![-1.0, -1.0]), QpRow::new(0.8, vec![-1.0, 0.3])];
    ([2.0, 2.0], [-1.0, -1.0], [1.0, 1.0], rows)
}
