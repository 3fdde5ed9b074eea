//! The two case studies and the closed-loop simulation harness.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::adaptation::{
    adaptation_at, assemble_phi, blend_filters, filter_blend, implicit_filter_update, initialize_weights, monitor_filter_margins, weights_interior,
    AdaptationContext, AdaptationOutput, ConstraintSnapshot, FeasibilityRow, WeightState,
};
use crate::controller::{
    ccbf_qp, ccbf_row, ecbf_qp, interior_start, omega_flow_control, strictly_admissible, ControlDecision, EcbfGains,
};
use crate::model::{ccbf_derivatives, ClassK, ConstraintSpec, ControlAffineSystem, PhiKernel};
use crate::numerics::{all_finite, min_eigenvalue_symmetric, Matrix, QpRow};
use crate::pcipm::{escalate_s, integrate_with_halving, BarrierError, MAX_S_DOUBLINGS};

pub type NominalFn = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;

/// Tunables of the weight adaptation law.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationSettings {
    pub w_min: f64,
    pub w_max: f64,
    pub s: f64,
    /// `P = p·I`
    pub gain: f64,
    pub eta_mu: f64,
    pub eta_nu: f64,
    pub tau: f64,
    pub convexity_floor: f64,
    /// Width of the `|q|` smoothing in the feasibility barrier.
    pub q_smoothing: f64,
    /// Correction-time budget for weight initialization (s).
    pub init_horizon: f64,
}

impl Default for AdaptationSettings {
    fn default() -> Self {
        Self {
            w_min: 0.01,
            w_max: 50.0,
            s: 1e3,
            gain: 100.0,
            eta_mu: 0.05,
            eta_nu: 0.05,
            tau: 0.05,
            convexity_floor: 1e-3,
            q_smoothing: 0.1,
            init_horizon: 50.0,
        }
    }
}

/// Goal region reported by the metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Goal {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

#[derive(Clone)]
pub struct Scenario {
    pub id: String,
    pub label: String,
    pub system: ControlAffineSystem,
    pub constraints: Vec<ConstraintSpec>,
    pub kernel: PhiKernel,
    pub alpha: ClassK,
    pub nominal: NominalFn,
    pub x0: Vec<f64>,
    pub w_guess: Vec<f64>,
    pub adaptation: AdaptationSettings,
    pub horizon: f64,
    pub dt: f64,
    /// Gain `B = b·I` of the control flow.
    pub flow_gain: f64,
    pub goal: Option<Goal>,
}

impl fmt::Debug for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Scenario")
            .field("id", &self.id)
            .field("label", &self.label)
            .field("system", &self.system)
            .field("constraints", &self.constraints)
            .field("kernel", &self.kernel)
            .field("alpha", &self.alpha)
            .field("x0", &self.x0)
            .field("w_guess", &self.w_guess)
            .field("adaptation", &self.adaptation)
            .field("horizon", &self.horizon)
            .field("dt", &self.dt)
            .finish_non_exhaustive()
    }
}

impl Scenario {
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn context(&self) -> AdaptationContext<'_> {
        AdaptationContext {
            kernel: self.kernel,
            constraints: &self.constraints,
            system: &self.system,
            alpha: self.alpha,
        }
    }

    /// Weight state at `w` carrying this scenario's adaptation settings.
    pub fn weight_state(&self, w: Vec<f64>) -> WeightState {
        let a = &self.adaptation;
        let c = w.len();
        let mut ws = WeightState::new(w, a.w_min, a.w_max, a.s, Matrix::scaled_identity(c, a.gain), self.system.m())
            .with_margins(a.eta_mu, a.eta_nu)
            .with_tau(a.tau);
        ws.convexity_floor = a.convexity_floor;
        ws.q_smoothing = a.q_smoothing;
        ws
    }
}

/// Parameters of the one-dimensional tracking problem.
#[derive(Debug, Clone, PartialEq)]
pub struct OneDimParams {
    pub gamma: f64,
    pub theta: f64,
    /// Potential-well edge `p`; the drift uses `k = ln 2 / p²`.
    pub p: f64,
    pub k_p: f64,
    pub x0: f64,
    pub w_guess: Vec<f64>,
    pub adaptation: AdaptationSettings,
    pub horizon: f64,
    pub dt: f64,
}

impl OneDimParams {
    pub fn new(gamma: f64, theta: f64) -> Self {
        Self {
            gamma,
            theta,
            p: 1.5616,
            k_p: 1.0,
            x0: 0.0,
            w_guess: vec![1.0, 1.0],
            adaptation: AdaptationSettings {
                eta_mu: default_eta_1d(gamma),
                eta_nu: default_eta_1d(gamma),
                ..AdaptationSettings::default()
            },
            horizon: 10.0,
            dt: 0.01,
        }
    }
}

/// Filter margin used inside `b_{2c+1}` for the 1-D problem.
///
/// At the symmetric start `q = 0`, so `b_{2c+1} = η_μ + η_ν − γH³` with
/// `H < 1`: the margins must stay well below `γ/2` or `𝒲(0)` is empty. This
/// caps them at `γ/20`, which reaches 0.05 only for `γ = 1`.
pub fn default_eta_1d(gamma: f64) -> f64 {
    (gamma / 20.0).min(0.05)
}

pub fn build_scenario_1d(gamma: f64, theta: f64) -> Scenario {
    build_scenario_1d_with(&OneDimParams::new(gamma, theta))
}

pub fn build_scenario_1d_with(params: &OneDimParams) -> Scenario {
    assert!(params.gamma > 0.0);
    let k = std::f64::consts::LN_2 / (params.p * params.p);
    let system = ControlAffineSystem::new(
        1,
        1,
        move |x| vec![x[0] * ((k * x[0] * x[0]).exp() - 1.0)],
        |x| Matrix::from_rows(&[vec![4.0 - x[0] * x[0]]]),
        vec![1.0],
    );
    let constraints = vec![
        ConstraintSpec::new("h1", |_, x| 2.0 - x[0], |_, _| 0.0, |_, _| vec![-1.0]),
        ConstraintSpec::new("h2", |_, x| x[0] + 2.0, |_, _| 0.0, |_, _| vec![1.0]),
    ];
    let (theta, k_p) = (params.theta, params.k_p);
    let nominal: NominalFn = Arc::new(move |t, x| vec![k_p * (reference_1d(t, theta) - x[0])]);
    Scenario {
        id: format!("1d-g{}-th{}", params.gamma, if theta.abs() < 1e-12 { "0".into() } else { format!("{theta:.4}") }),
        label: format!("1-D tracking, gamma = {}, theta = {:.4}", params.gamma, theta),
        system,
        constraints,
        kernel: PhiKernel::Exponential,
        alpha: ClassK::Cubic(params.gamma),
        nominal,
        x0: vec![params.x0],
        w_guess: params.w_guess.clone(),
        adaptation: params.adaptation.clone(),
        horizon: params.horizon,
        dt: params.dt,
        flow_gain: 100.0,
        goal: None,
    }
}

/// `x*(t) = 4 sin(2πt/5 + θ)`
pub fn reference_1d(t: f64, theta: f64) -> f64 {
    4.0 * (2.0 * PI * t / 5.0 + theta).sin()
}

/// Circular obstacle `(x − cx)² + (y − cy)² ≥ r²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

/// Parameters of the bicycle reach-avoid problem.
#[derive(Debug, Clone, PartialEq)]
pub struct BicycleParams {
    pub obstacles: Vec<Obstacle>,
    pub l_r: f64,
    /// Speed limit `S`.
    pub speed_limit: f64,
    /// Slip-angle limit `B`.
    pub slip_limit: f64,
    /// Deadline `T`.
    pub deadline: f64,
    pub goal_radius: f64,
    pub initial_radius: f64,
    pub goal: (f64, f64),
    pub start: (f64, f64),
    pub beta0: f64,
    pub v0: f64,
    /// `(ω̄, ā)`
    pub u_max: (f64, f64),
    pub w_guess: Vec<f64>,
    pub adaptation: AdaptationSettings,
    pub horizon: f64,
    pub dt: f64,
}

impl Default for BicycleParams {
    fn default() -> Self {
        let obstacle = |cx, cy| Obstacle { cx, cy, r: 0.4 };
        Self {
            obstacles: vec![
                obstacle(0.7, 1.1),
                obstacle(1.3, 0.6),
                obstacle(1.2, 1.6),
                obstacle(2.0, 1.1),
                obstacle(0.4, 0.3),
            ],
            l_r: 0.25,
            speed_limit: 2.0,
            slip_limit: PI / 3.0,
            deadline: 5.0,
            goal_radius: 0.1,
            initial_radius: 4.0,
            goal: (2.0, 2.0),
            start: (0.0, 0.0),
            beta0: 0.0,
            v0: 0.0,
            u_max: (2.0, 4.0),
            w_guess: vec![1.0; 8],
            adaptation: AdaptationSettings::default(),
            horizon: 5.0,
            dt: 0.01,
        }
    }
}

pub fn build_scenario_bicycle() -> Scenario {
    build_scenario_bicycle_with(&BicycleParams::default())
}

/// Wraps an angle to `(−π, π]`.
fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

pub fn build_scenario_bicycle_with(p: &BicycleParams) -> Scenario {
    let l_r = p.l_r;
    let system = ControlAffineSystem::new(
        5,
        2,
        move |z| {
            let (psi, beta, v) = (z[2], z[3], z[4]);
            let tb = beta.tan();
            vec![
                v * (psi.cos() - psi.sin() * tb),
                v * (psi.sin() + psi.cos() * tb),
                v * tb / l_r,
                0.0,
                0.0,
            ]
        },
        |_| {
            let mut g = Matrix::zeros(5, 2);
            g[(3, 0)] = 1.0;
            g[(4, 1)] = 1.0;
            g
        },
        vec![p.u_max.0, p.u_max.1],
    );
    let planar_hess = |sign: f64| {
        move |_: f64, _: &[f64]| {
            let mut h = Matrix::zeros(5, 5);
            h[(0, 0)] = 2.0 * sign;
            h[(1, 1)] = 2.0 * sign;
            h
        }
    };
    let mut constraints = Vec::with_capacity(p.obstacles.len() + 3);
    for (i, o) in p.obstacles.iter().copied().enumerate() {
        constraints.push(
            ConstraintSpec::new(
                format!("obstacle{}", i + 1),
                move |_, z| (z[0] - o.cx).powi(2) + (z[1] - o.cy).powi(2) - o.r * o.r,
                |_, _| 0.0,
                move |_, z| vec![2.0 * (z[0] - o.cx), 2.0 * (z[1] - o.cy), 0.0, 0.0, 0.0],
            )
            .with_hess(planar_hess(1.0))
            .with_relative_degree(2),
        );
    }
    let (s_lim, b_lim) = (p.speed_limit, p.slip_limit);
    constraints.push(
        ConstraintSpec::new("speed", move |_, z| s_lim * s_lim - z[4] * z[4], |_, _| 0.0, |_, z| {
            vec![0.0, 0.0, 0.0, 0.0, -2.0 * z[4]]
        })
        .with_hess(|_, _| {
            let mut h = Matrix::zeros(5, 5);
            h[(4, 4)] = -2.0;
            h
        }),
    );
    constraints.push(
        ConstraintSpec::new("slip", move |_, z| b_lim * b_lim - z[3] * z[3], |_, _| 0.0, |_, z| {
            vec![0.0, 0.0, 0.0, -2.0 * z[3], 0.0]
        })
        .with_hess(|_, _| {
            let mut h = Matrix::zeros(5, 5);
            h[(3, 3)] = -2.0;
            h
        }),
    );
    let (xg, yg) = p.goal;
    let (rg, ri, big_t) = (p.goal_radius, p.initial_radius, p.deadline);
    constraints.push(
        ConstraintSpec::new(
            "reach",
            move |t, z| {
                let shrink = 1.0 - t / big_t;
                rg * rg + ri * ri * shrink * shrink - (z[0] - xg).powi(2) - (z[1] - yg).powi(2)
            },
            move |t, _| -2.0 * ri * ri * (1.0 - t / big_t) / big_t,
            move |_, z| vec![-2.0 * (z[0] - xg), -2.0 * (z[1] - yg), 0.0, 0.0, 0.0],
        )
        .with_hess(planar_hess(-1.0))
        .with_relative_degree(2),
    );

    let (u_w, u_a) = p.u_max;
    let nominal: NominalFn = Arc::new(move |t, z| {
        let (dx, dy) = (xg - z[0], yg - z[1]);
        let dist = dx.hypot(dy);
        let heading_error = wrap_angle(dy.atan2(dx) - z[2]);
        let beta_d = heading_error.clamp(-0.8 * b_lim, 0.8 * b_lim);
        let remaining = (big_t - t).max(0.2);
        let v_d = (dist / remaining).min(0.9 * s_lim);
        vec![
            (4.0 * (beta_d - z[3])).clamp(-u_w, u_w),
            (2.0 * (v_d - z[4])).clamp(-u_a, u_a),
        ]
    });
    let (x0, y0) = p.start;
    Scenario {
        id: "bicycle".into(),
        label: "Bicycle reach-avoid".into(),
        system,
        constraints,
        kernel: PhiKernel::Exponential,
        alpha: ClassK::Linear(1.0),
        nominal,
        x0: vec![x0, y0, (yg - y0).atan2(xg - x0), p.beta0, p.v0],
        w_guess: p.w_guess.clone(),
        adaptation: p.adaptation.clone(),
        horizon: p.horizon,
        dt: p.dt,
        flow_gain: 100.0,
        goal: Some(Goal { x: xg, y: yg, radius: rg }),
    }
}

/// Which control law closes the loop.
#[derive(Debug, Clone, PartialEq)]
pub enum ControllerKind {
    CcbfQp,
    CcbfFlow,
    /// One `(k1, k2)` pair shared by every constraint.
    EcbfQp(EcbfGains),
    NominalOnly,
}

impl ControllerKind {
    pub fn id(&self) -> String {
        match self {
            ControllerKind::CcbfQp => "ccbf-qp".into(),
            ControllerKind::CcbfFlow => "ccbf-flow".into(),
            ControllerKind::EcbfQp((k1, k2)) => format!("ecbf-qp-{k1}-{k2}"),
            ControllerKind::NominalOnly => "nominal".into(),
        }
    }

    pub fn adapts(&self) -> bool {
        matches!(self, ControllerKind::CcbfQp | ControllerKind::CcbfFlow)
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

/// The conservative-to-aggressive E-CBF gain schedule.
pub const ECBF_GAIN_SCHEDULE: [EcbfGains; 4] = [(0.5, 0.25), (1.0, 1.0), (2.0, 4.0), (4.0, 16.0)];

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Completed,
    /// The controller could not satisfy its rows from `t` on at least once;
    /// the run continued with the clipped nominal input.
    ControllerInfeasible { t: f64 },
    /// The adaptation law broke down at `t`; the run stopped.
    AdaptationFailed { t: f64, reason: String },
    /// The state stopped being finite at `t`.
    Diverged { t: f64 },
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Completed => f.write_str("completed"),
            Outcome::ControllerInfeasible { t } => write!(f, "controller-infeasible@{t:.2}"),
            Outcome::AdaptationFailed { t, .. } => write!(f, "adaptation-failed@{t:.2}"),
            Outcome::Diverged { t } => write!(f, "diverged@{t:.2}"),
        }
    }
}

/// One logged step.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRecord {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub big_h: f64,
    pub b_ccbf: f64,
    pub h: Vec<f64>,
    pub feasible: bool,
    pub eta_mu_margin: f64,
    pub eta_nu_margin: f64,
    pub min_eig: f64,
    /// Value of the safety row at the applied input (`Ḣ + α(H)` for C-CBF runs).
    pub row_margin: f64,
    pub s: f64,
}

#[derive(Debug, Clone)]
pub struct SimLog {
    pub scenario_id: String,
    pub controller: String,
    pub seed: u64,
    pub records: Vec<SimRecord>,
    pub outcome: Outcome,
    /// Times the control flow had to be restarted from the QP solution.
    pub flow_restarts: usize,
}

/// Runs one closed-loop simulation. The dynamics are deterministic; `seed`
/// is carried into the log so a run matrix can be replayed verbatim.
pub fn run_simulation(scenario: &Scenario, controller: &ControllerKind, seed: u64) -> SimLog {
    let mut sim = Simulation::new(scenario, controller, seed);
    sim.run();
    sim.log
}

const FILTER_SEED_ITERATIONS: usize = 50;
/// Length of the start-up settling, in time constants of the slowest gain.
const SETTLE_TIME_CONSTANTS: f64 = 20.0;

struct Simulation<'a> {
    sc: &'a Scenario,
    kind: &'a ControllerKind,
    ctx: AdaptationContext<'a>,
    ws: WeightState,
    x: Vec<f64>,
    u_flow: Option<Vec<f64>>,
    log: SimLog,
}

enum StepError {
    Adaptation(String),
    Diverged,
}

impl<'a> Simulation<'a> {
    fn new(sc: &'a Scenario, kind: &'a ControllerKind, seed: u64) -> Self {
        Self {
            sc,
            kind,
            ctx: sc.context(),
            ws: sc.weight_state(sc.w_guess.clone()),
            x: sc.x0.clone(),
            u_flow: None,
            log: SimLog {
                scenario_id: sc.id.clone(),
                controller: kind.id(),
                seed,
                records: Vec::with_capacity(sc.steps() + 1),
                outcome: Outcome::Completed,
                flow_restarts: 0,
            },
        }
    }

    fn fail(&mut self, t: f64, reason: String) {
        self.log.outcome = Outcome::AdaptationFailed { t, reason };
    }

    fn mark_infeasible(&mut self, t: f64) {
        if self.log.outcome == Outcome::Completed {
            self.log.outcome = Outcome::ControllerInfeasible { t };
        }
    }

    fn run(&mut self) {
        let steps = self.sc.steps();
        let dt = self.sc.dt;
        if self.kind.adapts() {
            match initialize_weights(&self.sc.w_guess, &self.ws, &self.ctx, 0.0, &self.x, self.sc.adaptation.init_horizon)
            {
                Ok(w0) => {
                    self.ws.w_ref = w0.clone();
                    self.ws.w = w0;
                }
                Err(e) => return self.fail(0.0, e.to_string()),
            }
            // Settle the weights on the minimizer of Φ and start the filters
            // on the first sample rather than at rest. Φ depends on the
            // filters, so alternate until both stop moving. Otherwise μ opens
            // with a transient at rate `P` that no filter sampled at `dt` follows.
            for _ in 0..FILTER_SEED_ITERATIONS {
                if let Err(reason) = self.settle_weights() {
                    return self.fail(0.0, reason);
                }
                match self.adaptation(0.0) {
                    Ok(out) => {
                        let change = out.mu.iter().zip(&self.ws.mu_f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                        self.update_filters_guarded(0.0, &out, 1.0);
                        if change < 1e-10 {
                            break;
                        }
                    }
                    Err(StepError::Adaptation(reason)) => return self.fail(0.0, reason),
                    Err(StepError::Diverged) => unreachable!("no state update yet"),
                }
            }
        }
        for k in 0..=steps {
            let t = k as f64 * dt;
            let result = if self.kind.adapts() {
                self.adaptive_step(t, dt, k == steps)
            } else {
                self.fixed_weight_step(t, dt, k == steps)
            };
            match result {
                Ok(()) => {}
                Err(StepError::Adaptation(reason)) => return self.fail(t, reason),
                Err(StepError::Diverged) => {
                    self.log.outcome = Outcome::Diverged { t };
                    return;
                }
            }
        }
    }

    /// Runs the correction flow on `Φ(0, ·, x0)` from the current weights.
    fn settle_weights(&mut self) -> Result<(), String> {
        let horizon = SETTLE_TIME_CONSTANTS / min_eigenvalue_symmetric(&self.ws.gain).map_err(|e| e.to_string())?;
        let (w, s) = escalate_s(self.ws.s, |s| {
            let mut phi = assemble_phi(&self.ws, &self.ctx, 0.0, &self.x);
            phi.s = s;
            phi.correct_to_interior(0.0, &self.ws.w, horizon)
        })
        .map_err(|e| e.to_string())?;
        self.ws.w = w;
        self.ws.s = s;
        Ok(())
    }

    fn adaptation(&mut self, t: f64) -> Result<AdaptationOutput, StepError> {
        let (ws, ctx, x) = (&self.ws, &self.ctx, &self.x);
        let mut s = ws.s;
        for _ in 0..=MAX_S_DOUBLINGS {
            match adaptation_at(ws, ctx, t, x, &ws.w, s) {
                Ok(out) => {
                    self.ws.s = s;
                    return Ok(out);
                }
                Err(BarrierError::Convexity { .. }) => s *= 2.0,
                Err(e) => return Err(StepError::Adaptation(e.to_string())),
            }
        }
        Err(StepError::Adaptation(format!("convexity not restored up to s = {s:e}")))
    }

    fn adaptive_step(&mut self, t: f64, dt: f64, last: bool) -> Result<(), StepError> {
        let sc = self.sc;
        let deriv = ccbf_derivatives(sc.kernel, &sc.constraints, &sc.system, t, &self.ws.w, &self.x);
        let out = self.adaptation(t)?;
        let u_nom = (sc.nominal)(t, &self.x);
        let row = ccbf_row(&deriv, &out.mu, &out.nu, sc.alpha);
        let decision = match self.kind {
            ControllerKind::CcbfFlow => self.flow_decision(&deriv, &out, &row, &u_nom),
            _ => ccbf_qp(&deriv, &out.mu, &out.nu, &sc.system, sc.alpha, &u_nom),
        };
        if !decision.feasible {
            self.mark_infeasible(t);
        }
        let margins = monitor_filter_margins(&deriv, &self.ws, &out.mu, &out.nu, sc.system.u_max());
        self.log.records.push(SimRecord {
            t,
            x: self.x.clone(),
            u: decision.u.clone(),
            w: self.ws.w.clone(),
            big_h: deriv.value,
            b_ccbf: out.b_ccbf(),
            h: deriv.h.clone(),
            feasible: decision.feasible,
            eta_mu_margin: margins.lhs_mu,
            eta_nu_margin: margins.lhs_nu,
            min_eig: out.min_eig,
            row_margin: row.eval(&decision.u),
            s: out.s,
        });
        if last {
            return Ok(());
        }
        let (x_prev, w_prev) = (self.x.clone(), self.ws.w.clone());
        self.integrate_joint(t, dt, &decision.u)?;
        let blend = filter_blend(dt, self.ws.tau);
        match implicit_filter_update(&self.ws, &self.ctx, t + dt, &self.x, blend) {
            Some((mu_f, nu_f)) => {
                self.ws.mu_f = mu_f;
                self.ws.nu_f = nu_f;
            }
            None => self.update_filters_guarded(t + dt, &out, blend),
        }
        if matches!(self.kind, ControllerKind::CcbfFlow) {
            self.advance_flow(t, dt, &x_prev, &w_prev);
        }
        Ok(())
    }

    /// The flow input for this step, restarting from the QP when the carried
    /// input is no longer strictly admissible.
    fn flow_decision(
        &mut self,
        deriv: &crate::model::CcbfDerivatives,
        out: &AdaptationOutput,
        row: &QpRow,
        u_nom: &[f64],
    ) -> ControlDecision {
        let u_max = self.sc.system.u_max();
        if let Some(u) = &self.u_flow {
            if strictly_admissible(row, u, u_max) {
                return ControlDecision {
                    u: u.clone(),
                    feasible: true,
                    active_set: Vec::new(),
                    margin: row.eval(u),
                };
            }
        }
        let qp = ccbf_qp(deriv, &out.mu, &out.nu, &self.sc.system, self.sc.alpha, u_nom);
        if self.u_flow.is_some() {
            self.log.flow_restarts += 1;
        }
        match interior_start(row, &qp.u, u_max) {
            Some(u) if qp.feasible => {
                self.u_flow = Some(u.clone());
                ControlDecision {
                    margin: row.eval(&u),
                    u,
                    feasible: true,
                    active_set: qp.active_set,
                }
            }
            _ => {
                self.u_flow = None;
                qp
            }
        }
    }

    /// Advances the carried flow input across `[t, t + dt]`, interpolating
    /// `(x, w)` linearly between the two ends of the step.
    fn advance_flow(&mut self, t: f64, dt: f64, x_prev: &[f64], w_prev: &[f64]) {
        let Some(u_prev) = self.u_flow.clone() else { return };
        let sc = self.sc;
        let (x_next, w_next) = (self.x.clone(), self.ws.w.clone());
        let ws = &self.ws;
        let ctx = &self.ctx;
        let lerp = |a: &[f64], b: &[f64], r: f64| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p + r * (q - p)).collect() };
        let row_at = |tau: f64| -> Option<QpRow> {
            let r = (tau - t) / dt;
            let x = lerp(x_prev, &x_next, r);
            let w = lerp(w_prev, &w_next, r);
            let deriv = ccbf_derivatives(sc.kernel, &sc.constraints, &sc.system, tau, &w, &x);
            let out = adaptation_at(ws, ctx, tau, &x, &w, ws.s).ok()?;
            Some(ccbf_row(&deriv, &out.mu, &out.nu, sc.alpha))
        };
        let nominal_at = |tau: f64| {
            let x = lerp(x_prev, &x_next, (tau - t) / dt);
            (sc.nominal)(tau, &x)
        };
        let gain = Matrix::scaled_identity(sc.system.m(), sc.flow_gain);
        self.u_flow = omega_flow_control(row_at, nominal_at, sc.system.u_max(), &u_prev, t, dt, ws.s, &gain)
            .ok()
            .map(|d| d.u);
    }

    /// RK4 on the stacked `(x, w)` with the input held over the step and
    /// `μ, ν` refreshed at every stage.
    fn integrate_joint(&mut self, t: f64, dt: f64, u: &[f64]) -> Result<(), StepError> {
        let sc = self.sc;
        let n = self.x.len();
        let mut y0 = self.x.clone();
        y0.extend_from_slice(&self.ws.w);
        for _ in 0..=MAX_S_DOUBLINGS {
            let ws = &self.ws;
            let ctx = &self.ctx;
            let field = |tau: f64, y: &[f64]| -> Result<Vec<f64>, BarrierError> {
                let (x, w) = y.split_at(n);
                let out = adaptation_at(ws, ctx, tau, x, w, ws.s)?;
                let mut dy = sc.system.dynamics(x, u);
                dy.extend(out.rate(u));
                Ok(dy)
            };
            let accept = |tau: f64, y: &[f64]| {
                let (x, w) = y.split_at(n);
                all_finite(y) && weights_interior(ws, ctx, tau, x, w)
            };
            match integrate_with_halving(field, accept, t, &y0, t + dt, dt) {
                Ok(y) => {
                    if !all_finite(&y) {
                        return Err(StepError::Diverged);
                    }
                    self.x = y[..n].to_vec();
                    self.ws.w = y[n..].to_vec();
                    return Ok(());
                }
                Err(BarrierError::Convexity { .. }) => self.ws.s *= 2.0,
                Err(e) => return Err(StepError::Adaptation(e.to_string())),
            }
        }
        Err(StepError::Adaptation("convexity not restored during integration".into()))
    }

    /// Blends the filters toward `μ, ν`, shrinking the blend when the full
    /// update would push the current weights out of `𝒲`.
    fn update_filters_guarded(&mut self, t: f64, out: &AdaptationOutput, mut blend: f64) {
        for _ in 0..12 {
            let mut trial = self.ws.clone();
            blend_filters(&mut trial, &out.mu, &out.nu, blend);
            if weights_interior(&trial, &self.ctx, t, &self.x, &trial.w) {
                self.ws = trial;
                return;
            }
            blend *= 0.5;
        }
    }

    fn fixed_weight_step(&mut self, t: f64, dt: f64, last: bool) -> Result<(), StepError> {
        let sc = self.sc;
        let u_nom = (sc.nominal)(t, &self.x);
        let decision = match self.kind {
            ControllerKind::EcbfQp(gains) => {
                let gains = vec![*gains; sc.constraints.len()];
                ecbf_qp(&sc.constraints, &gains, &sc.system, t, &self.x, &u_nom)
                    .map_err(|e| StepError::Adaptation(e.to_string()))?
            }
            _ => ControlDecision {
                u: sc.system.clip_input(&u_nom),
                feasible: true,
                active_set: Vec::new(),
                margin: f64::INFINITY,
            },
        };
        if !decision.feasible {
            self.mark_infeasible(t);
        }
        let deriv = ccbf_derivatives(sc.kernel, &sc.constraints, &sc.system, t, &self.ws.w, &self.x);
        let b_ccbf = FeasibilityRow::new(ConstraintSnapshot::capture(&self.ctx, t, &self.x), &self.ws, &self.ctx)
            .value(&self.ws.w);
        self.log.records.push(SimRecord {
            t,
            x: self.x.clone(),
            u: decision.u.clone(),
            w: self.ws.w.clone(),
            big_h: deriv.value,
            b_ccbf,
            h: deriv.h,
            feasible: decision.feasible,
            eta_mu_margin: f64::NAN,
            eta_nu_margin: f64::NAN,
            min_eig: f64::NAN,
            row_margin: decision.margin,
            s: self.ws.s,
        });
        if last {
            return Ok(());
        }
        let u = decision.u;
        let x = crate::numerics::integrate_rk4(|_, x| sc.system.dynamics(x, &u), &self.x, t, t + dt, dt)
            .map_err(|_| StepError::Diverged)?;
        if !all_finite(&x) {
            return Err(StepError::Diverged);
        }
        self.x = x;
        Ok(())
    }
}

/// Summary statistics of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub outcome: Outcome,
    pub steps: usize,
    pub min_h: Vec<f64>,
    pub min_big_h: f64,
    pub max_b_ccbf: f64,
    pub feasible_fraction: f64,
    pub first_infeasible: Option<f64>,
    pub goal_distance: Option<f64>,
    /// `max_t |x_0(t)|`
    pub max_abs_x0: f64,
    pub max_abs_u: Vec<f64>,
    /// Smallest `lhs_mu` and `lhs_nu` seen.
    pub worst_eta_mu: f64,
    pub worst_eta_nu: f64,
    /// Largest `|lhs_mu|` and `|lhs_nu|` seen.
    pub max_abs_eta_mu: f64,
    pub max_abs_eta_nu: f64,
    pub min_min_eig: f64,
    pub min_row_margin: f64,
    pub min_w: f64,
    pub max_w: f64,
    pub input_total_variation: f64,
}

pub fn compute_metrics(log: &SimLog, scenario: &Scenario) -> Metrics {
    let recs = &log.records;
    let c = scenario.constraints.len();
    let fold_min = |f: &dyn Fn(&SimRecord) -> f64| recs.iter().map(f).filter(|v| !v.is_nan()).fold(f64::INFINITY, f64::min);
    let fold_max =
        |f: &dyn Fn(&SimRecord) -> f64| recs.iter().map(f).filter(|v| !v.is_nan()).fold(f64::NEG_INFINITY, f64::max);
    let m = scenario.system.m();
    let feasible = recs.iter().filter(|r| r.feasible).count();
    let tv: f64 = recs
        .windows(2)
        .map(|p| p[0].u.iter().zip(&p[1].u).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .sum();
    Metrics {
        outcome: log.outcome.clone(),
        steps: recs.len(),
        min_h: (0..c).map(|i| fold_min(&|r| r.h[i])).collect(),
        min_big_h: fold_min(&|r| r.big_h),
        max_b_ccbf: fold_max(&|r| r.b_ccbf),
        feasible_fraction: if recs.is_empty() { 0.0 } else { feasible as f64 / recs.len() as f64 },
        first_infeasible: recs.iter().find(|r| !r.feasible).map(|r| r.t),
        goal_distance: scenario
            .goal
            .and_then(|g| recs.last().map(|r| (r.x[0] - g.x).hypot(r.x[1] - g.y))),
        max_abs_x0: fold_max(&|r| r.x[0].abs()),
        max_abs_u: (0..m).map(|k| fold_max(&|r| r.u[k].abs())).collect(),
        worst_eta_mu: fold_min(&|r| r.eta_mu_margin),
        worst_eta_nu: fold_min(&|r| r.eta_nu_margin),
        max_abs_eta_mu: fold_max(&|r| r.eta_mu_margin.abs()),
        max_abs_eta_nu: fold_max(&|r| r.eta_nu_margin.abs()),
        min_min_eig: fold_min(&|r| r.min_eig),
        min_row_margin: fold_min(&|r| r.row_margin),
        min_w: fold_min(&|r| r.w.iter().copied().fold(f64::INFINITY, f64::min)),
        max_w: fold_max(&|r| r.w.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        input_total_variation: tv,
    }
}
