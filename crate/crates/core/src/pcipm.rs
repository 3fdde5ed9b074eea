//! Time-varying predictor-corrector interior-point flow.
//!
//! A [`BarrierProblem`] bundles an objective `J(t, y)`, inequality constraints
//! `c_j(t, y) < 0` and a barrier parameter `s` into the log-barrier function
//!
//! ```text
//! Ψ(t, y) = J(t, y) − (1/s) Σ_j log(−c_j(t, y))
//! ```
//!
//! whose minimizer is tracked by the flow
//!
//! ```text
//! ẏ = −(∇_yyΨ)⁻¹ [P ∇_yΨ + ∇_ytΨ]
//! ```
//!
//! The first term inside the bracket is the Newton-like correction, the second
//! the prediction. Derivatives come from the problem when it supplies them and
//! from central differences otherwise.

use thiserror::Error;

use crate::numerics::{
    all_finite, finite_diff_gradient, finite_diff_hessian, finite_diff_jacobian,
    min_eigenvalue_symmetric, norm, rk4_step, solve_linear, Matrix, NumericsError,
};

/// Default lower bound on the smallest eigenvalue of `∇_yyΨ`.
pub const DEFAULT_CONVEXITY_FLOOR: f64 = 1e-3;
/// Maximum number of times `s` is doubled before giving up.
pub const MAX_S_DOUBLINGS: usize = 20;
/// Central-difference step used for time partials.
pub const TIME_FD_STEP: f64 = 1e-5;
/// Smallest substep, as a fraction of the nominal step, before a flow gives up.
pub const MAX_HALVINGS: u32 = 6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BarrierError {
    #[error("constraint {index} left the feasible region (value {value:e})")]
    LeftFeasibleRegion { index: usize, value: f64 },
    #[error("barrier Hessian below convexity floor (min eigenvalue {min_eig:e})")]
    Convexity { min_eig: f64 },
    #[error("convexity still violated after raising s to {s:e} (min eigenvalue {min_eig:e})")]
    EscalationExhausted { s: f64, min_eig: f64 },
    #[error("flow could not stay interior at t = {t} even with the smallest substep")]
    StepCollapse { t: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type ScalarFn<'a> = Box<dyn Fn(f64, &[f64]) -> f64 + Send + Sync + 'a>;
pub type VectorFn<'a> = Box<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'a>;
pub type MatrixFn<'a> = Box<dyn Fn(f64, &[f64]) -> Matrix + Send + Sync + 'a>;

/// A scalar function of `(t, y)` with optional analytic derivatives.
pub struct BarrierTerm<'a> {
    value: ScalarFn<'a>,
    grad: Option<VectorFn<'a>>,
    hess: Option<MatrixFn<'a>>,
    time_partial: Option<ScalarFn<'a>>,
    grad_time_partial: Option<VectorFn<'a>>,
}

impl<'a> BarrierTerm<'a> {
    pub fn new(value: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'a) -> Self {
        Self {
            value: Box::new(value),
            grad: None,
            hess: None,
            time_partial: None,
            grad_time_partial: None,
        }
    }

    pub fn with_grad(mut self, grad: impl Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'a) -> Self {
        self.grad = Some(Box::new(grad));
        self
    }

    pub fn with_hess(mut self, hess: impl Fn(f64, &[f64]) -> Matrix + Send + Sync + 'a) -> Self {
        self.hess = Some(Box::new(hess));
        self
    }

    /// Analytic `∂/∂t` of the value and of its `y`-gradient.
    pub fn with_time_partials(
        mut self,
        dt: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'a,
        grad_dt: impl Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'a,
    ) -> Self {
        self.time_partial = Some(Box::new(dt));
        self.grad_time_partial = Some(Box::new(grad_dt));
        self
    }

    pub fn value(&self, t: f64, y: &[f64]) -> f64 {
        (self.value)(t, y)
    }

    pub fn grad(&self, t: f64, y: &[f64]) -> Result<Vec<f64>, NumericsError> {
        match &self.grad {
            Some(g) => Ok(g(t, y)),
            None => finite_diff_gradient(|p| (self.value)(t, p), y, 1e-5),
        }
    }

    pub fn hess(&self, t: f64, y: &[f64]) -> Result<Matrix, NumericsError> {
        match (&self.hess, &self.grad) {
            (Some(h), _) => Ok(h(t, y)),
            (None, Some(g)) => Ok(finite_diff_jacobian(|p| g(t, p), y, 1e-6)?.symmetrized()),
            (None, None) => finite_diff_hessian(|p| (self.value)(t, p), y, 1e-4),
        }
    }

    fn has_time_partials(&self) -> bool {
        self.time_partial.is_some() && self.grad_time_partial.is_some()
    }
}

/// Log-barrier problem over `y ∈ R^p`.
pub struct BarrierProblem<'a> {
    objective: BarrierTerm<'a>,
    constraints: Vec<BarrierTerm<'a>>,
    /// Barrier parameter `s > 0`.
    pub s: f64,
    /// Correction gain `P` (symmetric positive definite).
    pub gain: Matrix,
    /// Convexity floor `a` for `∇_yyΨ`.
    pub convexity_floor: f64,
    /// Nominal RK4 step used by [`BarrierProblem::correct_to_interior`].
    pub step: f64,
    time_invariant: bool,
}

/// The Newton system at one point: gradient, Hessian and its smallest eigenvalue.
#[derive(Debug, Clone)]
pub struct NewtonSystem {
    pub grad: Vec<f64>,
    pub hess: Matrix,
    pub min_eig: f64,
}

impl<'a> BarrierProblem<'a> {
    pub fn new(objective: BarrierTerm<'a>, constraints: Vec<BarrierTerm<'a>>, s: f64, gain: Matrix) -> Self {
        assert!(s > 0.0, "barrier parameter must be positive");
        assert_eq!(gain.rows(), gain.cols(), "gain must be square");
        let b = min_eigenvalue_symmetric(&gain).expect("gain must be symmetric");
        assert!(b > 0.0, "gain must be positive definite");
        let step = (0.5 / gain.max_abs()).min(0.01);
        Self {
            objective,
            constraints,
            s,
            gain,
            convexity_floor: DEFAULT_CONVEXITY_FLOOR,
            step,
            time_invariant: false,
        }
    }

    pub fn with_convexity_floor(mut self, a: f64) -> Self {
        assert!(a > 0.0);
        self.convexity_floor = a;
        self
    }

    pub fn with_step(mut self, step: f64) -> Self {
        assert!(step > 0.0);
        self.step = step;
        self
    }

    /// Declares `∇_ytΨ ≡ 0`.
    pub fn time_invariant(mut self) -> Self {
        self.time_invariant = true;
        self
    }

    pub fn dim(&self) -> usize {
        self.gain.rows()
    }

    pub fn constraint_count(&self) -> usize {
        self.constraints.len()
    }

    pub fn constraint_values(&self, t: f64, y: &[f64]) -> Vec<f64> {
        self.constraints.iter().map(|c| c.value(t, y)).collect()
    }

    /// Fails with the first constraint that is not strictly negative.
    pub fn check_interior(&self, t: f64, y: &[f64]) -> Result<Vec<f64>, BarrierError> {
        let values = self.constraint_values(t, y);
        for (index, value) in values.iter().enumerate() {
            if !(*value < 0.0) {
                return Err(BarrierError::LeftFeasibleRegion { index, value: *value });
            }
        }
        Ok(values)
    }

    pub fn is_interior(&self, t: f64, y: &[f64]) -> bool {
        self.check_interior(t, y).is_ok()
    }

    /// `Ψ(t, y) = J − (1/s) Σ log(−c_j)`.
    pub fn assemble_psi(&self, t: f64, y: &[f64]) -> Result<f64, BarrierError> {
        let c = self.check_interior(t, y)?;
        let barrier: f64 = c.iter().map(|cj| (-cj).ln()).sum();
        Ok(self.objective.value(t, y) - barrier / self.s)
    }

    pub fn grad_psi(&self, t: f64, y: &[f64]) -> Result<Vec<f64>, BarrierError> {
        let c = self.check_interior(t, y)?;
        let mut g = self.objective.grad(t, y)?;
        for (term, cj) in self.constraints.iter().zip(&c) {
            let gc = term.grad(t, y)?;
            for (gi, gci) in g.iter_mut().zip(&gc) {
                *gi -= gci / (cj * self.s);
            }
        }
        Ok(g)
    }

    pub fn hess_psi(&self, t: f64, y: &[f64]) -> Result<Matrix, BarrierError> {
        let c = self.check_interior(t, y)?;
        let p = y.len();
        let mut h = self.objective.hess(t, y)?;
        for (term, cj) in self.constraints.iter().zip(&c) {
            let gc = term.grad(t, y)?;
            let hc = term.hess(t, y)?;
            for i in 0..p {
                for j in 0..p {
                    h[(i, j)] -= (hc[(i, j)] / cj - gc[i] * gc[j] / (cj * cj)) / self.s;
                }
            }
        }
        Ok(h.symmetrized())
    }

    /// `∂/∂t ∇_yΨ`, analytic when every term supplies time partials.
    pub fn grad_t_psi(&self, t: f64, y: &[f64]) -> Result<Vec<f64>, BarrierError> {
        if self.time_invariant {
            return Ok(vec![0.0; y.len()]);
        }
        let analytic = self.objective.has_time_partials()
            && self.constraints.iter().all(BarrierTerm::has_time_partials);
        if analytic {
            let c = self.check_interior(t, y)?;
            let mut g = (self.objective.grad_time_partial.as_ref().unwrap())(t, y);
            for (term, cj) in self.constraints.iter().zip(&c) {
                let gc = term.grad(t, y)?;
                let gct = (term.grad_time_partial.as_ref().unwrap())(t, y);
                let ct = (term.time_partial.as_ref().unwrap())(t, y);
                for i in 0..y.len() {
                    g[i] -= (gct[i] / cj - gc[i] * ct / (cj * cj)) / self.s;
                }
            }
            return Ok(g);
        }
        let h = TIME_FD_STEP;
        let gp = self.grad_psi(t + h, y)?;
        let gm = self.grad_psi(t - h, y)?;
        Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
    }

    /// Gradient and Hessian of `Ψ`, with the convexity floor enforced.
    pub fn newton_system(&self, t: f64, y: &[f64]) -> Result<NewtonSystem, BarrierError> {
        let grad = self.grad_psi(t, y)?;
        let hess = self.hess_psi(t, y)?;
        if !hess.is_finite() || !all_finite(&grad) {
            return Err(NumericsError::NonFiniteStencil { component: 0 }.into());
        }
        let min_eig = min_eigenvalue_symmetric(&hess)?;
        if min_eig < self.convexity_floor {
            return Err(BarrierError::Convexity { min_eig });
        }
        Ok(NewtonSystem { grad, hess, min_eig })
    }

    /// `ẏ = −(∇_yyΨ)⁻¹ [P ∇_yΨ + ∇_ytΨ]`
    pub fn flow_field(&self, t: f64, y: &[f64]) -> Result<Vec<f64>, BarrierError> {
        let sys = self.newton_system(t, y)?;
        let gt = self.grad_t_psi(t, y)?;
        let mut rhs = self.gain.mul_vec(&sys.grad);
        for (r, g) in rhs.iter_mut().zip(&gt) {
            *r = -(*r + g);
        }
        Ok(solve_linear(&sys.hess, &rhs)?)
    }

    /// Correction term only: `ẏ = −(∇_yyΨ)⁻¹ P ∇_yΨ`.
    pub fn correction_field(&self, t: f64, y: &[f64]) -> Result<Vec<f64>, BarrierError> {
        let sys = self.newton_system(t, y)?;
        let rhs: Vec<f64> = self.gain.mul_vec(&sys.grad).iter().map(|v| -v).collect();
        Ok(solve_linear(&sys.hess, &rhs)?)
    }

    /// Integrates the full predictor-corrector flow from `t0` to `t1`.
    pub fn integrate_flow(&self, t0: f64, y0: &[f64], t1: f64, dt: f64) -> Result<Vec<f64>, BarrierError> {
        self.check_interior(t0, y0)?;
        integrate_with_halving(
            |t, y| self.flow_field(t, y),
            |t, y| self.is_interior(t, y),
            t0,
            y0,
            t1,
            dt,
        )
    }

    /// Runs the correction flow with time frozen at `t` for `horizon` seconds.
    pub fn correct_to_interior(&self, t: f64, y0: &[f64], horizon: f64) -> Result<Vec<f64>, BarrierError> {
        self.check_interior(t, y0)?;
        integrate_with_halving(
            |_, y| self.correction_field(t, y),
            |_, y| self.is_interior(t, y),
            0.0,
            y0,
            horizon,
            self.step,
        )
    }

    /// `C = ‖∇_yΨ(0, y0)‖ / a`, the tracking-error envelope constant.
    pub fn tracking_bound_constant(&self, y0: &[f64]) -> Result<f64, BarrierError> {
        Ok(norm(&self.grad_psi(0.0, y0)?) / self.convexity_floor)
    }

    /// Smallest eigenvalue of the gain, the exponential tracking rate.
    pub fn gain_floor(&self) -> f64 {
        min_eigenvalue_symmetric(&self.gain).expect("gain checked at construction")
    }
}

/// Fixed-step RK4 that halves the local step (down to `dt / 64`) whenever a
/// stage fails or the endpoint is rejected by `accept`.
pub fn integrate_with_halving<F, A>(
    mut field: F,
    accept: A,
    t0: f64,
    y0: &[f64],
    t1: f64,
    dt: f64,
) -> Result<Vec<f64>, BarrierError>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>, BarrierError>,
    A: Fn(f64, &[f64]) -> bool,
{
    assert!(dt > 0.0 && t1 >= t0);
    let min_step = dt / f64::from(1u32 << MAX_HALVINGS);
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut h = dt;
    while t1 - t > 1e-12 * dt {
        let step = h.min(t1 - t);
        let attempt = rk4_step(&mut field, t, &y, step);
        let ok = match attempt {
            Ok(next) if all_finite(&next) && accept(t + step, &next) => Some(next),
            Ok(_) => None,
            Err(BarrierError::LeftFeasibleRegion { .. }) | Err(BarrierError::Numerics(_)) => None,
            Err(e) => return Err(e),
        };
        match ok {
            Some(next) => {
                y = next;
                t += step;
                h = (h * 2.0).min(dt);
            }
            None => {
                h *= 0.5;
                if h < min_step * (1.0 - 1e-9) {
                    return Err(BarrierError::StepCollapse { t });
                }
            }
        }
    }
    Ok(y)
}

/// Retries `attempt` with `s` doubled after each convexity failure.
///
/// Returns the result together with the `s` that produced it.
pub fn escalate_s<T>(
    s0: f64,
    mut attempt: impl FnMut(f64) -> Result<T, BarrierError>,
) -> Result<(T, f64), BarrierError> {
    let mut s = s0;
    let mut last = f64::NAN;
    for _ in 0..=MAX_S_DOUBLINGS {
        match attempt(s) {
            Ok(v) => return Ok((v, s)),
            Err(BarrierError::Convexity { min_eig }) => {
                last = min_eig;
                s *= 2.0;
            }
            Err(e) => return Err(e),
        }
    }
    Err(BarrierError::EscalationExhausted { s: s / 2.0, min_eig: last })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(center: f64) -> BarrierTerm<'static> {
        BarrierTerm::new(move |_, y| 0.5 * (y[0] - center).powi(2))
            .with_grad(move |_, y| vec![y[0] - center])
            .with_hess(|_, _| Matrix::identity(1))
    }

    /// `J = ½y²`, `c = −y − 1`, `s = 4`.
    fn shifted_problem() -> BarrierProblem<'static> {
        BarrierProblem::new(
            quadratic(0.0),
            vec![BarrierTerm::new(|_, y| -y[0] - 1.0)],
            4.0,
            Matrix::identity(1),
        )
        .with_convexity_floor(1.0)
    }

    const Y_STAR: f64 = 0.207_106_781_186_547_5; // (−1 + √2) / 2

    #[test]
    fn psi_examples() {
        let p = BarrierProblem::new(quadratic(0.0), vec![], 1.0, Matrix::identity(1));
        assert_eq!(p.assemble_psi(0.0, &[3.0]).unwrap(), 4.5);
        let p = BarrierProblem::new(
            BarrierTerm::new(|_, _| 0.0),
            vec![BarrierTerm::new(|_, y| y[0] - 1.0)],
            1.0,
            Matrix::identity(1),
        );
        assert_eq!(p.assemble_psi(0.0, &[0.0]).unwrap(), 0.0);
        assert_eq!(shifted_problem().assemble_psi(0.0, &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn psi_outside_region_is_an_error() {
        let err = shifted_problem().assemble_psi(0.0, &[-1.0]).unwrap_err();
        assert_eq!(err, BarrierError::LeftFeasibleRegion { index: 0, value: 0.0 });
    }

    #[test]
    fn flow_vanishes_at_static_optimum() {
        let v = shifted_problem().time_invariant().flow_field(0.0, &[Y_STAR]).unwrap();
        assert!(v[0].abs() < 1e-8);
        // Without the static declaration the time partial is differenced and still vanishes.
        let v = shifted_problem().flow_field(0.0, &[Y_STAR]).unwrap();
        assert!(v[0].abs() < 1e-8);
    }

    #[test]
    fn prediction_tracks_moving_optimum() {
        let p = BarrierProblem::new(
            BarrierTerm::new(|t, y| 0.5 * (y[0] - t).powi(2)),
            vec![],
            1.0,
            Matrix::identity(1),
        );
        let v = p.flow_field(0.7, &[0.7]).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-6, "{v:?}");
    }

    #[test]
    fn flow_points_toward_barrier_optimum() {
        let p = shifted_problem();
        assert!(p.flow_field(0.0, &[2.0]).unwrap()[0] < 0.0);
        assert!(p.flow_field(0.0, &[-0.9]).unwrap()[0] > 0.0);
    }

    #[test]
    fn correction_examples() {
        let p = shifted_problem();
        let y = p.correct_to_interior(0.0, &[Y_STAR], 3.0).unwrap();
        assert!((y[0] - Y_STAR).abs() < 1e-10);

        let p = BarrierProblem::new(quadratic(0.0), vec![], 1.0, Matrix::identity(1));
        let y = p.correct_to_interior(0.0, &[1.0], 5.0).unwrap();
        assert!((y[0] - (-5.0f64).exp()).abs() < 1e-4);

        let y = shifted_problem().correct_to_interior(0.0, &[0.9], 10.0).unwrap();
        assert!((y[0] - Y_STAR).abs() < 1e-3);
    }

    #[test]
    fn tracking_constant_examples() {
        assert!(shifted_problem().tracking_bound_constant(&[Y_STAR]).unwrap() < 1e-12);
        let p = BarrierProblem::new(quadratic(0.0), vec![], 1.0, Matrix::identity(1)).with_convexity_floor(1.0);
        assert!((p.tracking_bound_constant(&[2.0]).unwrap() - 2.0).abs() < 1e-12);
        assert!((shifted_problem().tracking_bound_constant(&[0.0]).unwrap() - 0.25).abs() < 1e-9);
    }

    #[test]
    fn convexity_floor_violation_reports_eigenvalue() {
        let p = BarrierProblem::new(
            BarrierTerm::new(|_, y| -0.5 * y[0] * y[0]),
            vec![],
            1.0,
            Matrix::identity(1),
        );
        match p.flow_field(0.0, &[0.3]) {
            Err(BarrierError::Convexity { min_eig }) => assert!((min_eig + 1.0).abs() < 1e-4),
            other => panic!("expected convexity error, got {other:?}"),
        }
    }

    #[test]
    fn escalation_doubles_until_accepted() {
        let (v, s) = escalate_s(1.0, |s| {
            if s < 8.0 {
                Err(BarrierError::Convexity { min_eig: -1.0 })
            } else {
                Ok(s * 10.0)
            }
        })
        .unwrap();
        assert_eq!((v, s), (80.0, 8.0));
        let err = escalate_s(1.0, |_| -> Result<(), _> { Err(BarrierError::Convexity { min_eig: -2.0 }) });
        assert!(matches!(err, Err(BarrierError::EscalationExhausted { .. })));
    }

    #[test]
    fn analytic_time_partials_match_differences() {
        let make = |analytic: bool| {
            let mut obj = BarrierTerm::new(|t: f64, y: &[f64]| 0.5 * (y[0] - t.sin()).powi(2))
                .with_grad(|t, y| vec![y[0] - t.sin()]);
            let mut con = BarrierTerm::new(|t: f64, y: &[f64]| -y[0] - 1.0 - 0.5 * t.cos());
            if analytic {
                obj = obj.with_time_partials(|t, y| -(y[0] - t.sin()) * t.cos(), |t, _| vec![-t.cos()]);
                con = con.with_time_partials(|t, _| 0.5 * t.sin(), |_, _| vec![0.0]);
            }
            BarrierProblem::new(obj, vec![con], 4.0, Matrix::identity(1))
        };
        let a = make(true).grad_t_psi(0.4, &[0.1]).unwrap();
        let b = make(false).grad_t_psi(0.4, &[0.1]).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-7, "{a:?} vs {b:?}");
    }

    #[test]
    fn halving_recovers_from_rejected_steps() {
        // ẏ = −1 from y = 1 with a wall that rejects endpoints below 0.5 only once.
        let y = integrate_with_halving(|_, _| Ok(vec![-1.0]), |_, y| y[0] > 0.0, 0.0, &[1.0], 0.9, 0.5).unwrap();
        assert!((y[0] - 0.1).abs() < 1e-12);
        let err = integrate_with_halving(|_, _| Ok(vec![-1.0]), |_, y| y[0] > 0.5, 0.0, &[1.0], 1.0, 0.25);
        assert!(matches!(err, Err(BarrierError::StepCollapse { .. })));
    }
}
