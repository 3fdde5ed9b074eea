//! Safe control laws built on the box QP and the interior-point flow.

use thiserror::Error;

use crate::model::{CcbfDerivatives, ClassK, ConstraintSpec, ControlAffineSystem};
use crate::numerics::{dot, finite_diff_gradient, solve_box_qp, Matrix, NumericsError, QpConstraint, QpRow};
use crate::pcipm::{BarrierError, BarrierProblem, BarrierTerm};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControllerError {
    #[error("constraint `{name}` has relative degree 2 but no state Hessian")]
    MissingHessian { name: String },
    #[error("starting input is not strictly inside the admissible set")]
    NotInterior,
    #[error(transparent)]
    Barrier(#[from] BarrierError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// The input chosen at one step and how it was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlDecision {
    pub u: Vec<f64>,
    pub feasible: bool,
    /// Active constraints at the solution, or the conflicting set when infeasible.
    pub active_set: Vec<QpConstraint>,
    /// Smallest safety-row value at `u` (`+∞` without rows).
    pub margin: f64,
}

fn decide(system: &ControlAffineSystem, rows: &[QpRow], u_nominal: &[f64]) -> ControlDecision {
    let hi = system.u_max().to_vec();
    let lo = system.u_min();
    let margin_at = |u: &[f64]| rows.iter().map(|r| r.eval(u)).fold(f64::INFINITY, f64::min);
    match solve_box_qp(u_nominal, &lo, &hi, rows) {
        Ok(sol) => ControlDecision {
            margin: margin_at(&sol.u),
            u: sol.u,
            feasible: true,
            active_set: sol.active,
        },
        Err(NumericsError::Infeasible { conflicting }) => {
            let u = system.clip_input(u_nominal);
            ControlDecision {
                margin: margin_at(&u),
                u,
                feasible: false,
                active_set: conflicting.into_iter().map(QpConstraint::Row).collect(),
            }
        }
        Err(e) => panic!("box QP contract violated: {e}"),
    }
}

/// The C-CBF row `a + b·u ≥ 0` with
/// `a = α(H) + ∂H/∂t + (∂H/∂x) f + (∂H/∂w) μ` and `b = (∂H/∂x) g + (∂H/∂w) ν`.
pub fn ccbf_row(deriv: &CcbfDerivatives, mu: &[f64], nu: &Matrix, alpha: ClassK) -> QpRow {
    let a = alpha.eval(deriv.value) + deriv.d_dt + deriv.d_dx_f() + dot(&deriv.d_dw, mu);
    let extra = nu.tr_mul_vec(&deriv.d_dw);
    let b = deriv.d_dx_g().iter().zip(extra).map(|(x, y)| x + y).collect();
    QpRow::new(a, b)
}

/// Minimally modifies `u_nominal` subject to the box and the C-CBF row,
/// using the unfiltered `μ`, `ν`.
pub fn ccbf_qp(
    deriv: &CcbfDerivatives,
    mu: &[f64],
    nu: &Matrix,
    system: &ControlAffineSystem,
    alpha: ClassK,
    u_nominal: &[f64],
) -> ControlDecision {
    decide(system, &[ccbf_row(deriv, mu, nu, alpha)], u_nominal)
}

/// First-order CBF row `∂h/∂t + ∇h·f + ∇h·g u + α(h) ≥ 0`.
pub fn cbf_row(constraint: &ConstraintSpec, system: &ControlAffineSystem, alpha: ClassK, t: f64, x: &[f64]) -> QpRow {
    let grad = constraint.grad_x(t, x);
    let a = constraint.dh_dt(t, x) + dot(&grad, &system.f(x)) + alpha.eval(constraint.h(t, x));
    QpRow::new(a, system.g(x).tr_mul_vec(&grad))
}

pub fn single_cbf_qp(
    constraint: &ConstraintSpec,
    system: &ControlAffineSystem,
    alpha: ClassK,
    t: f64,
    x: &[f64],
    u_nominal: &[f64],
) -> ControlDecision {
    decide(system, &[cbf_row(constraint, system, alpha, t, x)], u_nominal)
}

/// Exponential CBF gains `(k1, k2)` for one constraint.
pub type EcbfGains = (f64, f64);

/// Step for the time and Jacobian differences inside the E-CBF rows.
const ECBF_FD_STEP: f64 = 1e-6;

/// Second-order row `ḧ + k1 ḣ + k2 h ≥ 0`, with `ḣ = ∂h/∂t + ∇h·f`.
fn ecbf_row(
    constraint: &ConstraintSpec,
    (k1, k2): EcbfGains,
    system: &ControlAffineSystem,
    t: f64,
    x: &[f64],
) -> Result<QpRow, ControllerError> {
    let hess = constraint.hess_xx(t, x).ok_or_else(|| ControllerError::MissingHessian {
        name: constraint.name.clone(),
    })?;
    let f = system.f(x);
    let grad = constraint.grad_x(t, x);
    let h_dot = |tau: f64, y: &[f64]| constraint.dh_dt(tau, y) + dot(&constraint.grad_x(tau, y), &system.f(y));
    // ∇_x ḣ = ∇_x(∂h/∂t) + ∇²h f + J_fᵀ ∇h
    let grad_ht = finite_diff_gradient(|y| constraint.dh_dt(t, y), x, ECBF_FD_STEP)?;
    let drift_along = finite_diff_gradient(|y| dot(&system.f(y), &grad), x, ECBF_FD_STEP)?;
    let hf = hess.mul_vec(&f);
    let grad_hdot: Vec<f64> = (0..x.len()).map(|i| grad_ht[i] + hf[i] + drift_along[i]).collect();
    let dt_hdot = (h_dot(t + ECBF_FD_STEP, x) - h_dot(t - ECBF_FD_STEP, x)) / (2.0 * ECBF_FD_STEP);
    let a = dt_hdot + dot(&grad_hdot, &f) + k1 * h_dot(t, x) + k2 * constraint.h(t, x);
    Ok(QpRow::new(a, system.g(x).tr_mul_vec(&grad_hdot)))
}

/// Exponential CBF-QP: relative-degree-2 constraints get the second-order row,
/// the rest the first-order row with `α(h) = k1·h`.
pub fn ecbf_qp(
    constraints: &[ConstraintSpec],
    gains: &[EcbfGains],
    system: &ControlAffineSystem,
    t: f64,
    x: &[f64],
    u_nominal: &[f64],
) -> Result<ControlDecision, ControllerError> {
    assert_eq!(constraints.len(), gains.len(), "one gain pair per constraint");
    let rows = constraints
        .iter()
        .zip(gains)
        .map(|(con, k)| match con.relative_degree {
            1 => Ok(cbf_row(con, system, ClassK::Linear(k.0), t, x)),
            _ => ecbf_row(con, *k, system, t, x),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(decide(system, &rows, u_nominal))
}

/// True iff `u` is strictly inside the box and strictly satisfies `row`.
pub fn strictly_admissible(row: &QpRow, u: &[f64], u_max: &[f64]) -> bool {
    row.eval(u) > 0.0 && u.iter().zip(u_max).all(|(v, b)| v.abs() < *b)
}

/// Moves a QP solution into the strict interior of the admissible set by
/// blending toward `0.9·sign(b)⊙ū`, the box point that favours the row most.
pub fn interior_start(row: &QpRow, u_qp: &[f64], u_max: &[f64]) -> Option<Vec<f64>> {
    if strictly_admissible(row, u_qp, u_max) {
        return Some(u_qp.to_vec());
    }
    let target: Vec<f64> = row
        .normal
        .iter()
        .zip(u_max)
        .map(|(b, um)| 0.9 * um * if *b >= 0.0 { 1.0 } else { -1.0 })
        .collect();
    let mut lambda = 0.01;
    while lambda <= 1.0 {
        let u: Vec<f64> = u_qp.iter().zip(&target).map(|(a, b)| a + lambda * (b - a)).collect();
        if strictly_admissible(row, &u, u_max) {
            return Some(u);
        }
        lambda *= 2.0;
    }
    strictly_admissible(row, &target, u_max).then_some(target)
}

/// One step of the interior-point control flow.
///
/// `row_at(τ)` gives the C-CBF row along the predicted trajectory of `(w, x)`
/// and `nominal_at(τ)` the desired input; together they make `Ω` a
/// time-varying barrier problem in `u` whose predictor-corrector flow absorbs
/// the `∇_uwΩ ẇ + ∇_uxΩ ẋ + ∇_utΩ` terms as a total time derivative.
#[allow(clippy::too_many_arguments)]
pub fn omega_flow_control<R, N>(
    row_at: R,
    nominal_at: N,
    u_max: &[f64],
    u_prev: &[f64],
    t: f64,
    dt: f64,
    s: f64,
    gain: &Matrix,
) -> Result<ControlDecision, ControllerError>
where
    R: Fn(f64) -> Option<QpRow> + Send + Sync,
    N: Fn(f64) -> Vec<f64> + Send + Sync,
{
    let m = u_max.len();
    let start_row = row_at(t).ok_or(ControllerError::NotInterior)?;
    if !strictly_admissible(&start_row, u_prev, u_max) {
        return Err(ControllerError::NotInterior);
    }
    let row_at = &row_at;
    let nominal_at = &nominal_at;
    let objective = BarrierTerm::new(move |tau, u| {
        0.5 * u.iter().zip(nominal_at(tau)).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    })
    .with_grad(move |tau, u| u.iter().zip(nominal_at(tau)).map(|(a, b)| a - b).collect())
    .with_hess(move |_, _| Matrix::identity(m));
    let mut constraints = Vec::with_capacity(2 * m + 1);
    for j in 0..m {
        let bound = u_max[j];
        for sign in [1.0, -1.0] {
            constraints.push(
                BarrierTerm::new(move |_, u| sign * u[j] - bound)
                    .with_grad(move |_, _| {
                        let mut e = vec![0.0; m];
                        e[j] = sign;
                        e
                    })
                    .with_hess(move |_, _| Matrix::zeros(m, m)),
            );
        }
    }
    constraints.push(
        BarrierTerm::new(move |tau, u| row_at(tau).map_or(f64::NAN, |r| -r.eval(u)))
            .with_grad(move |tau, _| row_at(tau).map_or(vec![f64::NAN; m], |r| r.normal.iter().map(|b| -b).collect()))
            .with_hess(move |_, _| Matrix::zeros(m, m)),
    );
    let omega = BarrierProblem::new(objective, constraints, s, gain.clone());
    let u = omega.integrate_flow(t, u_prev, t + dt, dt)?;
    let end_row = row_at(t + dt);
    Ok(ControlDecision {
        margin: end_row.as_ref().map_or(f64::NAN, |r| r.eval(&u)),
        feasible: end_row.is_some_and(|r| strictly_admissible(&r, &u, u_max)),
        u,
        active_set: Vec::new(),
    })
}
