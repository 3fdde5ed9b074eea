//! Independent references: brute-force grids, finite differences, closed forms.

use ccbf_core::controller::single_cbf_qp;
use ccbf_core::model::{ccbf_derivatives, ccbf_value};
use ccbf_core::numerics::{dot, solve_box_qp};
use ccbf_core::{BarrierProblem, BarrierTerm, ClassK, ConstraintSpec, ControlAffineSystem, Matrix, QpRow, Scenario};

// ---- box QP -------------------------------------------------------------

pub const QP_GRID: f64 = 1e-3;

/// Best feasible point of a 2-D box on a [`QP_GRID`] lattice.
pub fn grid_minimum(u0: &[f64], lo: &[f64], hi: &[f64], rows: &[QpRow]) -> Option<f64> {
    let n0 = ((hi[0] - lo[0]) / QP_GRID).floor() as usize;
    let n1 = ((hi[1] - lo[1]) / QP_GRID).floor() as usize;
    let mut best: Option<f64> = None;
    let mut u = [0.0; 2];
    for i in 0..=n0 {
        u[0] = lo[0] + i as f64 * QP_GRID;
        let d0 = 0.5 * (u[0] - u0[0]).powi(2);
        for j in 0..=n1 {
            u[1] = lo[1] + j as f64 * QP_GRID;
            if rows.iter().any(|r| r.offset + dot(&r.normal, &u) < 0.0) {
                continue;
            }
            let v = d0 + 0.5 * (u[1] - u0[1]).powi(2);
            if best.is_none_or(|b| v < b) {
                best = Some(v);
            }
        }
    }
    best
}

/// A symmetric box `[−half, half]` with rows that keep `frac ⊙ half`
/// strictly feasible by `slack`.
pub fn qp_instance(half: &[f64], frac: &[f64], raw: &[(Vec<f64>, f64)]) -> (Vec<f64>, Vec<f64>, Vec<QpRow>) {
    let lo: Vec<f64> = half.iter().map(|h| -h).collect();
    let u_in: Vec<f64> = frac.iter().zip(half).map(|(f, h)| f * h).collect();
    let rows = raw
        .iter()
        .map(|(normal, slack)| QpRow::new(slack - dot(normal, &u_in), normal.clone()))
        .collect();
    (lo, half.to_vec(), rows)
}

/// Solves one instance and compares it with the grid. Returns the KKT residual.
pub fn check_qp(u0: &[f64], lo: &[f64], hi: &[f64], rows: &[QpRow]) -> Result<f64, String> {
    let sol = solve_box_qp(u0, lo, hi, rows).map_err(|e| format!("solver: {e}"))?;
    if sol.kkt_residual > 1e-10 {
        return Err(format!("kkt residual {:e}", sol.kkt_residual));
    }
    if sol.u.iter().zip(lo.iter().zip(hi)).any(|(u, (l, h))| u < l || u > h) {
        return Err(format!("u = {:?} leaves the box", sol.u));
    }
    if rows.iter().any(|r| r.eval(&sol.u) < -1e-10) {
        return Err(format!("u = {:?} violates a row", sol.u));
    }
    let exact = 0.5 * sol.u.iter().zip(u0).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let grid = grid_minimum(u0, lo, hi, rows).ok_or("grid has no feasible point")?;
    // Grid points are feasible, so none beats the optimum; one lies within
    // a couple of diagonal cells of it.
    if exact > grid + 1e-12 {
        return Err(format!("solver {exact} worse than grid {grid}"));
    }
    let dist = sol.u.iter().zip(u0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let cell = 2.0 * QP_GRID * std::f64::consts::SQRT_2;
    if grid - exact > cell * (dist + cell) {
        return Err(format!("grid {grid} far above solver {exact}"));
    }
    Ok(sol.kkt_residual)
}

// ---- C-CBF partials -----------------------------------------------------

const FD_STEP: f64 = 1e-4;
pub const DERIVATIVE_TOL: f64 = 1e-6;

/// Fourth-order central difference of `f` at 0.
fn diff(f: impl Fn(f64) -> f64) -> f64 {
    (8.0 * (f(FD_STEP) - f(-FD_STEP)) - (f(2.0 * FD_STEP) - f(-2.0 * FD_STEP))) / (12.0 * FD_STEP)
}

/// `|a − b| / max(|a|, 1)`: relative above unit magnitude, absolute below.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Worst error of `∂H/∂t`, `∂H/∂x`, `∂H/∂w` against differences of `H`.
pub fn derivative_error(sc: &Scenario, t: f64, w: &[f64], x: &[f64]) -> Result<f64, String> {
    let d = ccbf_derivatives(sc.kernel, &sc.constraints, &sc.system, t, w, x);
    let value = |t: f64, w: &[f64], x: &[f64]| ccbf_value(sc.kernel, &sc.constraints, t, w, x);
    let mut worst = rel_err(d.value, value(t, w, x));
    let mut note = |what: String, a: f64, n: f64| -> Result<(), String> {
        let e = rel_err(a, n);
        worst = worst.max(e);
        if e > DERIVATIVE_TOL {
            Err(format!("{what}: analytic {a} vs difference {n}"))
        } else {
            Ok(())
        }
    };
    note("dH/dt".into(), d.d_dt, diff(|e| value(t + e, w, x)))?;
    for i in 0..x.len() {
        let fd = diff(|e| {
            let mut y = x.to_vec();
            y[i] += e;
            value(t, w, &y)
        });
        note(format!("dH/dx{i}"), d.d_dx[i], fd)?;
    }
    for j in 0..w.len() {
        let fd = diff(|e| {
            let mut v = w.to_vec();
            v[j] += e;
            value(t, &v, x)
        });
        note(format!("dH/dw{j}"), d.d_dw[j], fd)?;
    }
    Ok(worst)
}

/// Bicycle state from a point inside the reach disk at time `t`; far outside
/// it `φ_8` reaches 1e5 and differences drown in cancellation.
pub fn bicycle_state(t: f64, radial: f64, bearing: f64, psi: f64, beta: f64, v: f64) -> Vec<f64> {
    let r = radial * 4.0 * (1.0 - t / 5.0);
    vec![2.0 + r * bearing.cos(), 2.0 + r * bearing.sin(), psi, beta, v]
}

// ---- barrier tracking ---------------------------------------------------

/// `(−1 + √2) / 2`, the minimizer of `½y² − ¼ log(y + 1)`.
pub const Y_STAR: f64 = 0.207_106_781_186_547_5;

/// `ŷ*(t)` for `Ψ = ½(y − sin t)² − ¼ log(y + 1)`: the root of
/// `y² + (1 − sin t) y − sin t − ¼ = 0` above −1.
pub fn moving_optimum(t: f64) -> f64 {
    let st = t.sin();
    let b = 1.0 - st;
    0.5 * (-b + (b * b + 4.0 * (st + 0.25)).sqrt())
}

/// `J = ½(y − c(t))²` subject to `y > −1` with `s = 4`, `P = p·I`, floor `a = 1`.
pub fn tracking_problem(moving: bool, p: f64) -> BarrierProblem<'static> {
    let center = move |t: f64| if moving { t.sin() } else { 0.0 };
    let center_dt = move |t: f64| if moving { t.cos() } else { 0.0 };
    let objective = BarrierTerm::new(move |t, y| 0.5 * (y[0] - center(t)).powi(2))
        .with_grad(move |t, y| vec![y[0] - center(t)])
        .with_hess(|_, _| Matrix::identity(1))
        .with_time_partials(move |t, y| -(y[0] - center(t)) * center_dt(t), move |t, _| vec![-center_dt(t)]);
    let wall = BarrierTerm::new(|_, y| -y[0] - 1.0)
        .with_grad(|_, _| vec![-1.0])
        .with_hess(|_, _| Matrix::zeros(1, 1))
        .with_time_partials(|_, _| 0.0, |_, _| vec![0.0]);
    let p = BarrierProblem::new(objective, vec![wall], 4.0, Matrix::scaled_identity(1, p)).with_convexity_floor(1.0);
    if moving {
        p
    } else {
        p.time_invariant()
    }
}

/// Largest excess of `|y(t) − ŷ*(t)|` over `C e^{−bt}`, sampled every 0.1 s for 10 s.
pub fn tracking_excess(moving: bool, p: f64, y0: f64) -> f64 {
    let prob = tracking_problem(moving, p);
    let c = prob.tracking_bound_constant(&[y0]).unwrap();
    let b = prob.gain_floor();
    let target = |t: f64| if moving { moving_optimum(t) } else { Y_STAR };
    let mut y = vec![y0];
    let mut worst = (y0 - target(0.0)).abs() - c;
    for k in 0..100 {
        let (t0, t1) = (0.1 * k as f64, 0.1 * (k + 1) as f64);
        y = prob.integrate_flow(t0, &y, t1, 0.01).unwrap();
        worst = worst.max((y[0] - target(t1)).abs() - c * (-b * t1).exp());
    }
    worst
}

// ---- single-CBF invariance ----------------------------------------------

const CBF_DT: f64 = 0.01;
const CBF_HORIZON: f64 = 10.0;

fn integrator() -> ControlAffineSystem {
    ControlAffineSystem::new(2, 2, |_| vec![0.0, 0.0], |_| Matrix::identity(2), vec![3.0, 3.0])
}

/// `h(t, x) = d + v·t − a·x` with `a = (cos b, sin b)`.
pub fn drifting_halfplane(bearing: f64, d: f64, v: f64) -> ConstraintSpec {
    let a = [bearing.cos(), bearing.sin()];
    ConstraintSpec::new(
        "halfplane",
        move |t, x| d + v * t - a[0] * x[0] - a[1] * x[1],
        move |_, _| v,
        move |_, _| vec![-a[0], -a[1]],
    )
}

/// Integrator `ẋ = u`, `|u_k| ≤ 3`, under the single-CBF QP with a nominal
/// input pushing `push` m/s into the unsafe side. Returns the smallest `h`
/// at the step boundaries; the held input makes each step exact.
pub fn invariance_min_h(con: &ConstraintSpec, alpha: ClassK, x0: &[f64], push: f64, bearing: f64) -> f64 {
    let sys = integrator();
    let toward = [push * bearing.cos(), push * bearing.sin()];
    let mut x = x0.to_vec();
    let mut lowest = con.h(0.0, &x);
    let steps = (CBF_HORIZON / CBF_DT).round() as usize;
    for k in 0..steps {
        let t = k as f64 * CBF_DT;
        let decision = single_cbf_qp(con, &sys, alpha, t, &x, &toward);
        if !decision.feasible {
            return f64::NEG_INFINITY;
        }
        for (xi, ui) in x.iter_mut().zip(&decision.u) {
            *xi += CBF_DT * ui;
        }
        lowest = lowest.min(con.h(t + CBF_DT, &x));
    }
    lowest
}

/// Start `depth·d` back from the boundary along the normal.
pub fn halfplane_start(bearing: f64, d: f64, depth: f64) -> Vec<f64> {
    let r = d * (1.0 - depth);
    vec![r * bearing.cos(), r * bearing.sin()]
}
