//! Online adaptation of the constituent weights.
//!
//! The weights follow the predictor-corrector flow of the barrier function
//!
//! ```text
//! Φ(t, w, x) = ½‖w − w_ref‖² − (1/s) Σ_{j=1}^{2c+1} log(−b_j)
//! ```
//!
//! where `b_1..b_2c` keep each weight inside `(w_min, w_max)` and `b_{2c+1}`
//! asks that the consolidated CBF condition stay satisfiable under the input
//! bounds. The resulting law is affine in the input, `ẇ = μ + ν u`.
//!
//! `b_{2c+1}` contains `|q|`, which has a kink wherever a component of `q`
//! crosses zero; every crossing makes `ν` jump faster than any filter can
//! follow. The barrier therefore sees a smoothed majorant of the row (see
//! [`FeasibilityRow`]) whose weight gradient and Hessian are analytic. Cross
//! terms in `x` and `t` use central differences of the analytic gradient.

use thiserror::Error;

use crate::model::{CcbfDerivatives, ClassK, ControlAffineSystem, ConstraintSpec, PhiKernel};
use crate::numerics::{dot, min_eigenvalue_symmetric, solve_linear, Matrix, NumericsError};
use crate::pcipm::{
    escalate_s, integrate_with_halving, BarrierError, BarrierProblem, BarrierTerm, DEFAULT_CONVEXITY_FLOOR,
    TIME_FD_STEP,
};

/// Relative step for state perturbations of `∇_wΦ`.
const STATE_FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdaptationError {
    #[error("initial weight {index} = {value} is not strictly inside (w_min, w_max)")]
    GuessOutsideBounds { index: usize, value: f64 },
    #[error("no interior weight found within the correction budget (b_ccbf = {b_ccbf:e})")]
    InitializationFailed { b_ccbf: f64 },
    #[error(transparent)]
    Barrier(#[from] BarrierError),
}

impl From<NumericsError> for AdaptationError {
    fn from(e: NumericsError) -> Self {
        AdaptationError::Barrier(e.into())
    }
}

/// Weights, their bounds and the filter states of the adaptation law.
#[derive(Debug, Clone)]
pub struct WeightState {
    pub w: Vec<f64>,
    pub w_min: f64,
    pub w_max: f64,
    /// Barrier parameter; grows when convexity has to be restored.
    pub s: f64,
    /// Correction gain `P` (`c × c`).
    pub gain: Matrix,
    pub mu_f: Vec<f64>,
    /// Filtered `ν`, `c × m`.
    pub nu_f: Matrix,
    pub eta_mu: f64,
    pub eta_nu: f64,
    /// Filter time constant in seconds.
    pub tau: f64,
    /// Center of the proximal objective `½‖w − w_ref‖²`.
    pub w_ref: Vec<f64>,
    pub convexity_floor: f64,
    /// Width `ε` of the `|q|` smoothing inside the barrier; 0 keeps it exact.
    pub q_smoothing: f64,
}

impl WeightState {
    /// Fresh state with zero filters, `w_ref = w`, `η_μ = η_ν = 0.05` and `τ = 0.05`.
    pub fn new(w: Vec<f64>, w_min: f64, w_max: f64, s: f64, gain: Matrix, m: usize) -> Self {
        assert!(w_min > 0.0 && w_min < w_max, "need 0 < w_min < w_max");
        assert!(s > 0.0);
        assert_eq!(gain.rows(), w.len());
        assert_eq!(gain.cols(), w.len());
        let c = w.len();
        Self {
            w_ref: w.clone(),
            w,
            w_min,
            w_max,
            s,
            gain,
            mu_f: vec![0.0; c],
            nu_f: Matrix::zeros(c, m),
            eta_mu: 0.05,
            eta_nu: 0.05,
            tau: 0.05,
            convexity_floor: DEFAULT_CONVEXITY_FLOOR,
            q_smoothing: 0.0,
        }
    }

    pub fn with_margins(mut self, eta_mu: f64, eta_nu: f64) -> Self {
        assert!(eta_mu > 0.0 && eta_nu > 0.0);
        self.eta_mu = eta_mu;
        self.eta_nu = eta_nu;
        self
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        assert!(tau > 0.0);
        self.tau = tau;
        self
    }

    pub fn c(&self) -> usize {
        self.w.len()
    }

    pub fn m(&self) -> usize {
        self.nu_f.cols()
    }
}

/// Everything about the plant the adaptation law needs.
#[derive(Debug, Clone, Copy)]
pub struct AdaptationContext<'a> {
    pub kernel: PhiKernel,
    pub constraints: &'a [ConstraintSpec],
    pub system: &'a ControlAffineSystem,
    pub alpha: ClassK,
}

/// Output of one evaluation of the adaptation law.
#[derive(Debug, Clone)]
pub struct AdaptationOutput {
    pub mu: Vec<f64>,
    /// `c × m`
    pub nu: Matrix,
    /// `b_1..b_{2c+1}`
    pub b_values: Vec<f64>,
    /// Smallest eigenvalue of `∇_wwΦ`.
    pub min_eig: f64,
    pub delta: f64,
    pub q: Vec<f64>,
    /// Barrier parameter actually used.
    pub s: f64,
}

impl AdaptationOutput {
    pub fn b_ccbf(&self) -> f64 {
        *self.b_values.last().expect("at least one row")
    }

    /// `ẇ = μ + ν u`
    pub fn rate(&self, u: &[f64]) -> Vec<f64> {
        let nu_u = self.nu.mul_vec(u);
        self.mu.iter().zip(nu_u).map(|(a, b)| a + b).collect()
    }
}

/// `w_min − w_j` for every `j`, then `w_j − w_max`.
pub fn eval_bound_constraints(ws: &WeightState) -> Vec<f64> {
    bound_values(&ws.w, ws.w_min, ws.w_max)
}

fn bound_values(w: &[f64], w_min: f64, w_max: f64) -> Vec<f64> {
    w.iter().map(|wj| w_min - wj).chain(w.iter().map(|wj| wj - w_max)).collect()
}

/// `δ = η_μ + η_ν − ∂H/∂t − (∂H/∂x) f − (∂H/∂w) μ^f − α(H)`
pub fn eval_delta(deriv: &CcbfDerivatives, ws: &WeightState, alpha: ClassK) -> f64 {
    ws.eta_mu + ws.eta_nu - deriv.d_dt - deriv.d_dx_f() - dot(&deriv.d_dw, &ws.mu_f) - alpha.eval(deriv.value)
}

/// `q = L_gᵀ p_h + (ν^f)ᵀ p_w`
pub fn eval_q(deriv: &CcbfDerivatives, ws: &WeightState) -> Vec<f64> {
    let a = deriv.l_g.tr_mul_vec(&deriv.p_h);
    let b = ws.nu_f.tr_mul_vec(&deriv.p_w);
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// `b_{2c+1} = δ − |q|ᵀ ū`
pub fn eval_b_ccbf(delta: f64, q: &[f64], u_max: &[f64]) -> f64 {
    delta - q.iter().zip(u_max).map(|(qk, uk)| qk.abs() * uk).sum::<f64>()
}

/// Constraint data at a fixed `(t, x)`; with it `b_{2c+1}` is cheap to
/// evaluate as a function of `w` alone.
#[derive(Debug, Clone)]
pub struct ConstraintSnapshot {
    pub h: Vec<f64>,
    /// `L_t + L_f`
    pub drift: Vec<f64>,
    pub l_g: Matrix,
}

impl ConstraintSnapshot {
    pub fn capture(ctx: &AdaptationContext<'_>, t: f64, x: &[f64]) -> Self {
        let f = ctx.system.f(x);
        let g = ctx.system.g(x);
        let c = ctx.constraints.len();
        let mut l_g = Matrix::zeros(c, ctx.system.m());
        let mut h = Vec::with_capacity(c);
        let mut drift = Vec::with_capacity(c);
        for (i, con) in ctx.constraints.iter().enumerate() {
            let grad = con.grad_x(t, x);
            h.push(con.h(t, x));
            drift.push(con.dh_dt(t, x) + dot(&grad, &f));
            for (k, v) in g.tr_mul_vec(&grad).into_iter().enumerate() {
                l_g[(i, k)] = v;
            }
        }
        Self { h, drift, l_g }
    }
}

/// `b_{2c+1}` as a function of the weights for frozen `(t, x)` and filters.
///
/// The barrier uses the smoothed row `b_ε = δ − Σ ū_k ψ_ε(q_k)` with
/// `ψ_ε(q) = √(q² + ε²) − ε ≤ |q|`, so `b_ε ≥ b_{2c+1}` everywhere and
/// `b_ε < 0` certifies `b_{2c+1} < 0`. With `ε = 0` the row is exact and
/// derivatives use `sign(q)`.
#[derive(Debug, Clone)]
pub struct FeasibilityRow {
    snap: ConstraintSnapshot,
    kernel: PhiKernel,
    alpha: ClassK,
    mu_f: Vec<f64>,
    nu_f: Matrix,
    eta: f64,
    u_max: Vec<f64>,
    smoothing: f64,
}

/// `ψ_ε(q)`, `ψ_ε'(q)`, `ψ_ε''(q)`
fn smooth_abs(q: f64, eps: f64) -> (f64, f64, f64) {
    if eps == 0.0 {
        return (q.abs(), if q > 0.0 { 1.0 } else if q < 0.0 { -1.0 } else { 0.0 }, 0.0);
    }
    let r = q.hypot(eps);
    (r - eps, q / r, eps * eps / (r * r * r))
}

impl FeasibilityRow {
    pub fn new(snap: ConstraintSnapshot, ws: &WeightState, ctx: &AdaptationContext<'_>) -> Self {
        Self {
            snap,
            kernel: ctx.kernel,
            alpha: ctx.alpha,
            mu_f: ws.mu_f.clone(),
            nu_f: ws.nu_f.clone(),
            eta: ws.eta_mu + ws.eta_nu,
            u_max: ctx.system.u_max().to_vec(),
            smoothing: ws.q_smoothing,
        }
    }

    fn consolidated(&self, w: &[f64]) -> f64 {
        1.0 - self.snap.h.iter().zip(w).map(|(h, wj)| self.kernel.value(*h, *wj)).sum::<f64>()
    }

    pub fn delta(&self, w: &[f64]) -> f64 {
        let mut d = self.eta - self.alpha.eval(self.consolidated(w));
        for (j, (h, wj)) in self.snap.h.iter().zip(w).enumerate() {
            d += self.kernel.dr(*h, *wj) * self.snap.drift[j] + self.kernel.ds(*h, *wj) * self.mu_f[j];
        }
        d
    }

    pub fn q(&self, w: &[f64]) -> Vec<f64> {
        let m = self.u_max.len();
        let mut q = vec![0.0; m];
        for (j, (h, wj)) in self.snap.h.iter().zip(w).enumerate() {
            let pr = self.kernel.dr(*h, *wj);
            let ps = self.kernel.ds(*h, *wj);
            for (k, qk) in q.iter_mut().enumerate() {
                *qk += pr * self.snap.l_g[(j, k)] + ps * self.nu_f[(j, k)];
            }
        }
        q
    }

    /// Exact `b_{2c+1} = δ − |q|ᵀū`.
    pub fn value(&self, w: &[f64]) -> f64 {
        eval_b_ccbf(self.delta(w), &self.q(w), &self.u_max)
    }

    /// `b_ε`, the row the barrier sees.
    pub fn value_smoothed(&self, w: &[f64]) -> f64 {
        let q = self.q(w);
        self.delta(w) - q.iter().zip(&self.u_max).map(|(qk, uk)| uk * smooth_abs(*qk, self.smoothing).0).sum::<f64>()
    }

    /// `∂q_k/∂w_j` (row `j`) and `∂²q_k/∂w_j²`; `q` is separable in `w`.
    fn q_partials(&self, w: &[f64]) -> (Matrix, Matrix) {
        let (c, m) = (w.len(), self.u_max.len());
        let mut d1 = Matrix::zeros(c, m);
        let mut d2 = Matrix::zeros(c, m);
        for j in 0..c {
            let (h, wj) = (self.snap.h[j], w[j]);
            let (rs, ss, rss, sss) = (
                self.kernel.drs(h, wj),
                self.kernel.dss(h, wj),
                self.kernel.drss(h, wj),
                self.kernel.dsss(h, wj),
            );
            for k in 0..m {
                d1[(j, k)] = rs * self.snap.l_g[(j, k)] + ss * self.nu_f[(j, k)];
                d2[(j, k)] = rss * self.snap.l_g[(j, k)] + sss * self.nu_f[(j, k)];
            }
        }
        (d1, d2)
    }

    pub fn grad_smoothed(&self, w: &[f64]) -> Vec<f64> {
        let da = self.alpha.deriv(self.consolidated(w));
        let q = self.q(w);
        let slope: Vec<f64> = q.iter().map(|qk| smooth_abs(*qk, self.smoothing).1).collect();
        let (dq, _) = self.q_partials(w);
        (0..w.len())
            .map(|j| {
                let (h, wj) = (self.snap.h[j], w[j]);
                let d_delta = self.kernel.drs(h, wj) * self.snap.drift[j]
                    + self.kernel.dss(h, wj) * self.mu_f[j]
                    + da * self.kernel.ds(h, wj);
                let d_abs: f64 = (0..q.len()).map(|k| self.u_max[k] * slope[k] * dq[(j, k)]).sum();
                d_delta - d_abs
            })
            .collect()
    }

    pub fn hess_smoothed(&self, w: &[f64]) -> Matrix {
        let c = w.len();
        let big_h = self.consolidated(w);
        let da = self.alpha.deriv(big_h);
        let dda = self.alpha.second_deriv(big_h);
        let q = self.q(w);
        let psi: Vec<(f64, f64, f64)> = q.iter().map(|qk| smooth_abs(*qk, self.smoothing)).collect();
        let (dq, ddq) = self.q_partials(w);
        let ps: Vec<f64> = (0..c).map(|j| self.kernel.ds(self.snap.h[j], w[j])).collect();
        let mut out = Matrix::zeros(c, c);
        for i in 0..c {
            for j in 0..c {
                let curv: f64 = (0..q.len()).map(|k| self.u_max[k] * psi[k].2 * dq[(i, k)] * dq[(j, k)]).sum();
                out[(i, j)] = -dda * ps[i] * ps[j] - curv;
            }
            let (h, wi) = (self.snap.h[i], w[i]);
            let slope: f64 = (0..q.len()).map(|k| self.u_max[k] * psi[k].1 * ddq[(i, k)]).sum();
            out[(i, i)] += self.kernel.drss(h, wi) * self.snap.drift[i]
                + self.kernel.dsss(h, wi) * self.mu_f[i]
                + da * self.kernel.dss(h, wi)
                - slope;
        }
        out
    }
}

/// `Φ` at a fixed `(t, x)`.
#[derive(Debug, Clone)]
struct PhiSnapshot {
    row: FeasibilityRow,
    w_min: f64,
    w_max: f64,
    w_ref: Vec<f64>,
    s: f64,
}

impl PhiSnapshot {
    fn new(ws: &WeightState, ctx: &AdaptationContext<'_>, t: f64, x: &[f64], s: f64) -> Self {
        Self {
            row: FeasibilityRow::new(ConstraintSnapshot::capture(ctx, t, x), ws, ctx),
            w_min: ws.w_min,
            w_max: ws.w_max,
            w_ref: ws.w_ref.clone(),
            s,
        }
    }

    fn values(&self, w: &[f64]) -> Vec<f64> {
        let mut b = bound_values(w, self.w_min, self.w_max);
        b.push(self.row.value_smoothed(w));
        b
    }

    fn check(values: &[f64]) -> Result<(), BarrierError> {
        match values.iter().position(|b| !(*b < 0.0)) {
            Some(index) => Err(BarrierError::LeftFeasibleRegion { index, value: values[index] }),
            None => Ok(()),
        }
    }

    fn grad(&self, w: &[f64]) -> Result<Vec<f64>, BarrierError> {
        let b_row = self.row.value_smoothed(w);
        let mut all = bound_values(w, self.w_min, self.w_max);
        all.push(b_row);
        Self::check(&all)?;
        let c = w.len();
        let gb = self.row.grad_smoothed(w);
        Ok((0..c)
            .map(|j| {
                let lower = all[j];
                let upper = all[c + j];
                // ∇J − (1/s) Σ ∇b / b
                (w[j] - self.w_ref[j]) - (-1.0 / lower + 1.0 / upper + gb[j] / b_row) / self.s
            })
            .collect())
    }

    fn hess(&self, w: &[f64]) -> Result<Matrix, BarrierError> {
        let b_row = self.row.value_smoothed(w);
        let mut all = bound_values(w, self.w_min, self.w_max);
        all.push(b_row);
        Self::check(&all)?;
        let c = w.len();
        let gb = self.row.grad_smoothed(w);
        let hb = self.row.hess_smoothed(w);
        let mut out = Matrix::identity(c);
        for i in 0..c {
            for j in 0..c {
                out[(i, j)] -= (hb[(i, j)] / b_row - gb[i] * gb[j] / (b_row * b_row)) / self.s;
            }
            let lower = all[i];
            let upper = all[c + i];
            out[(i, i)] += (1.0 / (lower * lower) + 1.0 / (upper * upper)) / self.s;
        }
        Ok(out.symmetrized())
    }
}

/// Builds `Φ` over `w` at a fixed `(t, x)` as a generic barrier problem.
///
/// The filter states are frozen.
pub fn assemble_phi(ws: &WeightState, ctx: &AdaptationContext<'_>, t: f64, x: &[f64]) -> BarrierProblem<'static> {
    let snap = PhiSnapshot::new(ws, ctx, t, x, ws.s);
    let w_ref = ws.w_ref.clone();
    let c = ws.c();
    let w_ref_grad = w_ref.clone();
    let objective = BarrierTerm::new(move |_, w| 0.5 * w.iter().zip(&w_ref).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .with_grad(move |_, w| w.iter().zip(&w_ref_grad).map(|(a, b)| a - b).collect())
        .with_hess(move |_, _| Matrix::identity(c));
    let mut constraints = bound_terms(c, ws.w_min, ws.w_max);
    let row = snap.row;
    let (r1, r2, r3) = (row.clone(), row.clone(), row);
    constraints.push(
        BarrierTerm::new(move |_, w| r1.value_smoothed(w))
            .with_grad(move |_, w| r2.grad_smoothed(w))
            .with_hess(move |_, w| r3.hess_smoothed(w)),
    );
    BarrierProblem::new(objective, constraints, ws.s, ws.gain.clone())
        .with_convexity_floor(ws.convexity_floor)
        .time_invariant()
}

fn bound_terms(c: usize, w_min: f64, w_max: f64) -> Vec<BarrierTerm<'static>> {
    let unit = move |j: usize, sign: f64| {
        let mut e = vec![0.0; c];
        e[j] = sign;
        e
    };
    let lower = (0..c).map(move |j| {
        BarrierTerm::new(move |_, w| w_min - w[j])
            .with_grad(move |_, _| unit(j, -1.0))
            .with_hess(move |_, _| Matrix::zeros(c, c))
    });
    let upper = (0..c).map(move |j| {
        BarrierTerm::new(move |_, w| w[j] - w_max)
            .with_grad(move |_, _| unit(j, 1.0))
            .with_hess(move |_, _| Matrix::zeros(c, c))
    });
    lower.chain(upper).collect()
}

/// `μ` and `ν` at `(t, w, x)` with barrier parameter `s`, without escalation.
pub fn adaptation_at(
    ws: &WeightState,
    ctx: &AdaptationContext<'_>,
    t: f64,
    x: &[f64],
    w: &[f64],
    s: f64,
) -> Result<AdaptationOutput, BarrierError> {
    let c = w.len();
    let n = x.len();
    let base = PhiSnapshot::new(ws, ctx, t, x, s);
    let b_values = base.values(w);
    PhiSnapshot::check(&b_values)?;
    let grad = base.grad(w)?;
    let hess = base.hess(w)?;
    if !hess.is_finite() {
        return Err(NumericsError::NonFiniteStencil { component: 0 }.into());
    }
    let min_eig = min_eigenvalue_symmetric(&hess)?;
    if min_eig < ws.convexity_floor {
        return Err(BarrierError::Convexity { min_eig });
    }

    // Only the feasibility row depends on `(t, x)`. Differencing `b` and
    // `∇_w b` rather than `∇_wΦ` keeps the stencil valid right up to the
    // boundary of `𝒲`, where the barrier gradient varies on the scale of `1/s`.
    let b_row = base.row.value_smoothed(w);
    let g_row = base.row.grad_smoothed(w);
    let cross = |db: f64, dg: &[f64]| -> Vec<f64> {
        (0..c).map(|j| -(dg[j] / b_row - g_row[j] * db / (b_row * b_row)) / s).collect()
    };
    let row_at = |tq: f64, xq: &[f64]| {
        let r = FeasibilityRow::new(ConstraintSnapshot::capture(ctx, tq, xq), ws, ctx);
        (r.value_smoothed(w), r.grad_smoothed(w))
    };
    let mut cross_x = Matrix::zeros(c, n);
    let mut probe = x.to_vec();
    for i in 0..n {
        let step = STATE_FD_STEP * (1.0 + x[i].abs());
        probe[i] = x[i] + step;
        let (bp, gp) = row_at(t, &probe);
        probe[i] = x[i] - step;
        let (bm, gm) = row_at(t, &probe);
        probe[i] = x[i];
        let dg: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * step)).collect();
        for (j, v) in cross((bp - bm) / (2.0 * step), &dg).into_iter().enumerate() {
            cross_x[(j, i)] = v;
        }
    }
    let (bp, gp) = row_at(t + TIME_FD_STEP, x);
    let (bm, gm) = row_at(t - TIME_FD_STEP, x);
    let dg: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * TIME_FD_STEP)).collect();
    let cross_t = cross((bp - bm) / (2.0 * TIME_FD_STEP), &dg);
    if !cross_x.is_finite() || !cross_t.iter().all(|v| v.is_finite()) {
        return Err(NumericsError::NonFiniteStencil { component: 0 }.into());
    }

    let (mu, nu) = adaptation_law(&ws.gain, &grad, &hess, &cross_x, &cross_t, &ctx.system.f(x), &ctx.system.g(x))?;
    let row = &base.row;
    let mut b_values = b_values;
    *b_values.last_mut().expect("row present") = row.value(w);
    Ok(AdaptationOutput {
        mu,
        nu,
        delta: row.delta(w),
        q: row.q(w),
        b_values,
        min_eig,
        s,
    })
}

/// `μ = −(∇_wwΦ)⁻¹[P∇_wΦ + ∇_wxΦ f + ∇_wtΦ]`, `ν = −(∇_wwΦ)⁻¹ ∇_wxΦ g`.
pub fn adaptation_law(
    gain: &Matrix,
    grad: &[f64],
    hess: &Matrix,
    cross_x: &Matrix,
    cross_t: &[f64],
    f: &[f64],
    g: &Matrix,
) -> Result<(Vec<f64>, Matrix), BarrierError> {
    let c = grad.len();
    let p_grad = gain.mul_vec(grad);
    let xf = cross_x.mul_vec(f);
    let rhs: Vec<f64> = (0..c).map(|j| -(p_grad[j] + xf[j] + cross_t[j])).collect();
    let mu = solve_linear(hess, &rhs).map_err(convexity_on_singular)?;
    let xg = cross_x.matmul(g);
    let mut nu = Matrix::zeros(c, g.cols());
    for k in 0..g.cols() {
        let col: Vec<f64> = xg.column(k).iter().map(|v| -v).collect();
        let sol = solve_linear(hess, &col).map_err(convexity_on_singular)?;
        for j in 0..c {
            nu[(j, k)] = sol[j];
        }
    }
    Ok((mu, nu))
}

/// A singular Newton matrix is a convexity failure: raising `s` is the remedy.
fn convexity_on_singular(e: NumericsError) -> BarrierError {
    match e {
        NumericsError::Singular { .. } => BarrierError::Convexity { min_eig: 0.0 },
        other => other.into(),
    }
}

/// `μ`, `ν` at the current weights, doubling `s` until `∇_wwΦ ⪰ a`.
pub fn compute_mu_nu(
    ws: &WeightState,
    ctx: &AdaptationContext<'_>,
    t: f64,
    x: &[f64],
) -> Result<AdaptationOutput, BarrierError> {
    escalate_s(ws.s, |s| adaptation_at(ws, ctx, t, x, &ws.w, s)).map(|(out, _)| out)
}

/// Integrates `ẇ = μ + ν u` over `dt` with the state frozen, refreshing
/// `μ, ν` at every RK4 stage and halving the step whenever `w` would leave
/// the feasible region.
pub fn step_weights(
    ws: &WeightState,
    ctx: &AdaptationContext<'_>,
    t: f64,
    x: &[f64],
    u: &[f64],
    dt: f64,
) -> Result<Vec<f64>, BarrierError> {
    integrate_with_halving(
        |tau, w| Ok(adaptation_at(ws, ctx, tau, x, w, ws.s)?.rate(u)),
        |tau, w| weights_interior(ws, ctx, tau, x, w),
        t,
        &ws.w,
        t + dt,
        dt,
    )
}

/// True iff all `2c+1` feasibility constraints are strictly negative.
pub fn weights_interior(ws: &WeightState, ctx: &AdaptationContext<'_>, t: f64, x: &[f64], w: &[f64]) -> bool {
    w.iter().all(|wj| *wj > ws.w_min && *wj < ws.w_max)
        && FeasibilityRow::new(ConstraintSnapshot::capture(ctx, t, x), ws, ctx).value_smoothed(w) < 0.0
}

/// Exponential-Euler low-pass update of `μ^f` and `ν^f` toward `μ`, `ν`.
pub fn update_filters(ws: &mut WeightState, mu: &[f64], nu: &Matrix, dt: f64) {
    let blend = filter_blend(dt, ws.tau);
    blend_filters(ws, mu, nu, blend);
}

/// `1 − e^{−dt/τ}`
pub fn filter_blend(dt: f64, tau: f64) -> f64 {
    -(-dt / tau).exp_m1()
}

pub(crate) fn blend_filters(ws: &mut WeightState, mu: &[f64], nu: &Matrix, blend: f64) {
    for (f, v) in ws.mu_f.iter_mut().zip(mu) {
        *f += blend * (v - *f);
    }
    for j in 0..nu.rows() {
        for k in 0..nu.cols() {
            let f = ws.nu_f[(j, k)];
            ws.nu_f[(j, k)] = f + blend * (nu[(j, k)] - f);
        }
    }
}

/// Newton iterations allowed for [`implicit_filter_update`].
const IMPLICIT_FILTER_ITERATIONS: usize = 8;

fn pack_filters(mu: &[f64], nu: &Matrix) -> Vec<f64> {
    let mut z = mu.to_vec();
    z.extend_from_slice(nu.as_slice());
    z
}

fn unpack_filters(z: &[f64], c: usize, m: usize) -> (Vec<f64>, Matrix) {
    (z[..c].to_vec(), Matrix::from_row_slice(c, m, &z[c..]))
}

/// Backward-Euler version of the filter update at `(t, x, ws.w)`.
///
/// Solves `z = (1 − β) z_prev + β N(z)` for `z = (μ^f, ν^f)`, where `N`
/// evaluates the adaptation law with the filters set to `z`. The filters
/// enter the feasibility row, and near the boundary of `𝒲` the law reacts to
/// them with a gain far above `1/β`, so the explicit blend rings. The
/// implicit form does not. Returns `None` when Newton stalls; callers fall
/// back to the explicit blend.
pub fn implicit_filter_update(
    ws: &WeightState,
    ctx: &AdaptationContext<'_>,
    t: f64,
    x: &[f64],
    blend: f64,
) -> Option<(Vec<f64>, Matrix)> {
    let (c, m) = (ws.c(), ws.m());
    let z_prev = pack_filters(&ws.mu_f, &ws.nu_f);
    let residual = |z: &[f64]| -> Option<Vec<f64>> {
        let mut trial = ws.clone();
        (trial.mu_f, trial.nu_f) = unpack_filters(z, c, m);
        let out = adaptation_at(&trial, ctx, t, x, &ws.w, ws.s).ok()?;
        let n = pack_filters(&out.mu, &out.nu);
        Some((0..z.len()).map(|i| z[i] - (1.0 - blend) * z_prev[i] - blend * n[i]).collect())
    };
    let mut z = z_prev.clone();
    let mut r = residual(&z)?;
    for _ in 0..IMPLICIT_FILTER_ITERATIONS {
        let scale = 1.0 + z.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if r.iter().all(|v| v.abs() <= 1e-10 * scale) {
            return Some(unpack_filters(&z, c, m));
        }
        let dim = z.len();
        let mut jac = Matrix::zeros(dim, dim);
        for k in 0..dim {
            let step = 1e-6 * (1.0 + z[k].abs());
            let mut zp = z.clone();
            zp[k] += step;
            let rp = residual(&zp)?;
            for i in 0..dim {
                jac[(i, k)] = (rp[i] - r[i]) / step;
            }
        }
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        let dz = solve_linear(&jac, &neg).ok()?;
        let norm_r = r.iter().map(|v| v * v).sum::<f64>();
        let mut lambda = 1.0;
        loop {
            let cand: Vec<f64> = z.iter().zip(&dz).map(|(a, d)| a + lambda * d).collect();
            if let Some(rc) = residual(&cand) {
                if rc.iter().map(|v| v * v).sum::<f64>() < norm_r {
                    z = cand;
                    r = rc;
                    break;
                }
            }
            lambda *= 0.5;
            if lambda < 1e-4 {
                return None;
            }
        }
    }
    let scale = 1.0 + z.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    r.iter().all(|v| v.abs() <= 1e-6 * scale).then(|| unpack_filters(&z, c, m))
}

/// Per-step filter deviations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterMargins {
    /// `(∂H/∂w)(μ^f − μ)`
    pub lhs_mu: f64,
    /// `sup_u(∂H/∂x g + ∂H/∂w ν^f)u − sup_u(∂H/∂x g + ∂H/∂w ν)u`
    pub lhs_nu: f64,
    /// `lhs_mu ≥ −η_μ` and `lhs_nu ≥ −η_ν`.
    pub ok: bool,
}

impl FilterMargins {
    /// Both deviations within `±η`. The upper side is what carries the
    /// filtered feasibility row over to the true C-CBF condition.
    pub fn within(&self, eta_mu: f64, eta_nu: f64) -> bool {
        self.lhs_mu.abs() <= eta_mu && self.lhs_nu.abs() <= eta_nu
    }
}

pub fn monitor_filter_margins(
    deriv: &CcbfDerivatives,
    ws: &WeightState,
    mu: &[f64],
    nu: &Matrix,
    u_max: &[f64],
) -> FilterMargins {
    let diff: Vec<f64> = ws.mu_f.iter().zip(mu).map(|(a, b)| a - b).collect();
    let lhs_mu = dot(&deriv.d_dw, &diff);
    let base = deriv.d_dx_g();
    let sup = |nu: &Matrix| -> f64 {
        let extra = nu.tr_mul_vec(&deriv.d_dw);
        base.iter().zip(extra).zip(u_max).map(|((a, b), u)| (a + b).abs() * u).sum()
    };
    let lhs_nu = sup(&ws.nu_f) - sup(nu);
    FilterMargins {
        lhs_mu,
        lhs_nu,
        ok: lhs_mu >= -ws.eta_mu && lhs_nu >= -ws.eta_nu,
    }
}

/// Outer iterations allowed for the feasibility phase of initialization.
const INIT_MAX_ROUNDS: usize = 400;

/// Finds weights strictly inside `𝒲(t)` starting from `w_guess`.
///
/// A guess that is already interior is returned unchanged. Otherwise a
/// sequence of proximal problems `min κ b_{2c+1}(w) + ½‖w − w_k‖²` is solved
/// with the correction flow under the bound barriers, re-centering after each
/// solve, until `b_{2c+1} < −(η_μ + η_ν)`. That slack absorbs the shift of
/// `𝒲` once the filters start. A final correction on the full `Φ` centered
/// on that point moves the result off the bound barriers.
///
/// `horizon` bounds the total correction time spent.
pub fn initialize_weights(
    w_guess: &[f64],
    ws: &WeightState,
    ctx: &AdaptationContext<'_>,
    t: f64,
    x: &[f64],
    horizon: f64,
) -> Result<Vec<f64>, AdaptationError> {
    for (index, value) in w_guess.iter().enumerate() {
        if !(*value > ws.w_min && *value < ws.w_max) {
            return Err(AdaptationError::GuessOutsideBounds { index, value: *value });
        }
    }
    if weights_interior(ws, ctx, t, x, w_guess) {
        return Ok(w_guess.to_vec());
    }
    let c = w_guess.len();
    let row = FeasibilityRow::new(ConstraintSnapshot::capture(ctx, t, x), ws, ctx);
    let rate = min_eigenvalue_symmetric(&ws.gain)?;
    let round_horizon = 10.0 / rate;
    let target = -(ws.eta_mu + ws.eta_nu);
    let mut w = w_guess.to_vec();
    let mut spent = 0.0;
    let mut rounds = 0;
    while row.value_smoothed(&w) >= target {
        if rounds >= INIT_MAX_ROUNDS || spent >= horizon {
            return Err(AdaptationError::InitializationFailed { b_ccbf: row.value(&w) });
        }
        let g = row.grad_smoothed(&w);
        let mut kappa = 0.5 / g.iter().map(|v| v.abs()).fold(1e-9, f64::max);
        let next = loop {
            let center = w.clone();
            let (r1, r2, r3) = (row.clone(), row.clone(), row.clone());
            let (c1, c2) = (center.clone(), center);
            let objective = BarrierTerm::new(move |_, y| {
                kappa * r1.value_smoothed(y) + 0.5 * y.iter().zip(&c1).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            })
            .with_grad(move |_, y| {
                let gb = r2.grad_smoothed(y);
                y.iter().zip(&c2).zip(gb).map(|((a, b), g)| a - b + kappa * g).collect()
            })
            .with_hess(move |_, y| r3.hess_smoothed(y).scale(kappa).add_scaled_identity(1.0));
            let problem = BarrierProblem::new(objective, bound_terms(c, ws.w_min, ws.w_max), ws.s, ws.gain.clone())
                .with_convexity_floor(ws.convexity_floor)
                .time_invariant();
            match problem.correct_to_interior(t, &w, round_horizon) {
                Ok(next) => break next,
                Err(BarrierError::Convexity { .. }) if kappa > 1e-12 => kappa *= 0.25,
                Err(e) => return Err(e.into()),
            }
        };
        spent += round_horizon;
        rounds += 1;
        if (0..c).all(|j| (next[j] - w[j]).abs() < 1e-12) {
            return Err(AdaptationError::InitializationFailed { b_ccbf: row.value(&w) });
        }
        w = next;
    }
    let mut centered = ws.clone();
    centered.w_ref = w.clone();
    let phi = assemble_phi(&centered, ctx, t, x);
    let (w0, _) = escalate_s(ws.s, |s| {
        let mut p = assemble_phi(&centered, ctx, t, x);
        p.s = s;
        p.correct_to_interior(t, &w, round_horizon)
    })?;
    debug_assert!(phi.is_interior(t, &w0));
    Ok(w0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ccbf_derivatives;

    fn bounds_1d() -> Vec<ConstraintSpec> {
        vec![
            ConstraintSpec::new("upper", |_, x| 2.0 - x[0], |_, _| 0.0, |_, _| vec![-1.0]),
            ConstraintSpec::new("lower", |_, x| x[0] + 2.0, |_, _| 0.0, |_, _| vec![1.0]),
        ]
    }

    fn plant() -> ControlAffineSystem {
        let k = std::f64::consts::LN_2 / 1.5616f64.powi(2);
        ControlAffineSystem::new(
            1,
            1,
            move |x| vec![x[0] * ((k * x[0] * x[0]).exp() - 1.0)],
            |x| Matrix::from_rows(&[vec![4.0 - x[0] * x[0]]]),
            vec![1.0],
        )
    }

    fn state(w: Vec<f64>) -> WeightState {
        let c = w.len();
        WeightState::new(w, 0.01, 50.0, 1e3, Matrix::scaled_identity(c, 100.0), 1)
    }

    #[test]
    fn bound_constraint_examples() {
        let mut ws = state(vec![0.5]);
        let b = eval_bound_constraints(&ws);
        assert!((b[0] + 0.49).abs() < 1e-15 && (b[1] + 49.5).abs() < 1e-15);
        ws.w = vec![0.01];
        assert_eq!(eval_bound_constraints(&ws)[0], 0.0);
        ws.w = vec![25.005];
        assert!(eval_bound_constraints(&ws).iter().all(|v| *v < 0.0));
    }

    fn zero_derivs(value: f64, c: usize, m: usize) -> CcbfDerivatives {
        CcbfDerivatives {
            value,
            d_dt: 0.0,
            d_dx: vec![0.0; 1],
            d_dw: vec![0.0; c],
            p_h: vec![0.0; c],
            p_w: vec![0.0; c],
            p_hw: vec![0.0; c],
            p_ww: vec![0.0; c],
            l_t: vec![0.0; c],
            l_f: vec![0.0; c],
            l_g: Matrix::zeros(c, m),
            h: vec![0.0; c],
        }
    }

    #[test]
    fn delta_examples() {
        let ws = state(vec![1.0]);
        let d = zero_derivs(0.0, 1, 1);
        assert!((eval_delta(&d, &ws, ClassK::Linear(1.0)) - 0.1).abs() < 1e-15);
        let ws0 = ws.clone().with_margins(1e-300, 1e-300);
        let d = zero_derivs(1.0, 1, 1);
        assert!((eval_delta(&d, &ws0, ClassK::Linear(1.0)) + 1.0).abs() < 1e-12);
        let doubled = ws.clone().with_margins(0.1, 0.05);
        assert!((eval_delta(&d, &doubled, ClassK::Linear(1.0)) - eval_delta(&d, &ws, ClassK::Linear(1.0)) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn q_examples() {
        let mut ws = state(vec![1.0]);
        let mut d = zero_derivs(0.0, 1, 1);
        d.l_g = Matrix::from_rows(&[vec![2.0]]);
        d.p_h = vec![-0.5];
        d.p_w = vec![-0.3];
        assert_eq!(eval_q(&d, &ws), vec![-1.0]);
        ws.nu_f = Matrix::from_rows(&[vec![1.0]]);
        assert!((eval_q(&d, &ws)[0] + 1.3).abs() < 1e-15);
        d.l_g = Matrix::zeros(1, 1);
        assert!((eval_q(&d, &ws)[0] + 0.3).abs() < 1e-15);
    }

    #[test]
    fn b_ccbf_examples() {
        assert!((eval_b_ccbf(0.1, &[0.3, -0.4], &[1.0, 2.0]) + 1.0).abs() < 1e-15);
        assert_eq!(eval_b_ccbf(-1.0, &[0.0], &[1.0]), -1.0);
        assert_eq!(eval_b_ccbf(0.5, &[0.25, -0.125], &[1.0, 2.0]), 0.0);
    }

    fn context<'a>(cons: &'a [ConstraintSpec], sys: &'a ControlAffineSystem, gamma: f64) -> AdaptationContext<'a> {
        AdaptationContext {
            kernel: PhiKernel::Exponential,
            constraints: cons,
            system: sys,
            alpha: ClassK::Cubic(gamma),
        }
    }

    #[test]
    fn feasibility_row_matches_derivative_route() {
        let cons = bounds_1d();
        let sys = plant();
        let ctx = context(&cons, &sys, 0.1);
        let mut ws = state(vec![1.7, 2.9]);
        ws.mu_f = vec![0.3, -0.2];
        ws.nu_f = Matrix::from_rows(&[vec![0.4], vec![-0.7]]);
        let x = [0.6];
        let d = ccbf_derivatives(ctx.kernel, &cons, &sys, 0.0, &ws.w, &x);
        let direct = eval_b_ccbf(eval_delta(&d, &ws, ctx.alpha), &eval_q(&d, &ws), sys.u_max());
        let row = FeasibilityRow::new(ConstraintSnapshot::capture(&ctx, 0.0, &x), &ws, &ctx);
        assert!((row.value(&ws.w) - direct).abs() < 1e-14);
    }

    #[test]
    fn smoothed_row_derivatives_match_differences() {
        let cons = bounds_1d();
        let sys = plant();
        let ctx = context(&cons, &sys, 1.0);
        let mut ws = state(vec![1.3, 0.8]);
        ws.q_smoothing = 0.1;
        ws.mu_f = vec![0.5, -0.1];
        ws.nu_f = Matrix::from_rows(&[vec![0.2], vec![0.9]]);
        let row = FeasibilityRow::new(ConstraintSnapshot::capture(&ctx, 0.0, &[0.4]), &ws, &ctx);
        let fd = crate::numerics::finite_diff_gradient(|w| row.value_smoothed(w), &ws.w, 1e-6).unwrap();
        let an = row.grad_smoothed(&ws.w);
        for (a, b) in fd.iter().zip(&an) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
        let fdh = crate::numerics::finite_diff_jacobian(|w| row.grad_smoothed(w), &ws.w, 1e-6).unwrap();
        let anh = row.hess_smoothed(&ws.w);
        for i in 0..2 {
            for j in 0..2 {
                assert!((fdh[(i, j)] - anh[(i, j)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn assembled_phi_examples() {
        let cons = bounds_1d();
        let sys = plant();
        let ctx = context(&cons, &sys, 1.0);
        let ws = state(vec![3.0, 3.0]);
        let phi = assemble_phi(&ws, &ctx, 0.0, &[0.0]);
        assert_eq!(phi.constraint_count(), 5);
        let b = phi.constraint_values(0.0, &ws.w);
        let expect: f64 = -b.iter().map(|v| (-v).ln()).sum::<f64>() / ws.s;
        assert!((phi.assemble_psi(0.0, &ws.w).unwrap() - expect).abs() < 1e-14);
        // Analytic gradient and Hessian agree with differences of Φ.
        let fd = crate::numerics::finite_diff_gradient(|w| phi.assemble_psi(0.0, w).unwrap(), &ws.w, 1e-6).unwrap();
        let an = phi.grad_psi(0.0, &ws.w).unwrap();
        for (a, b) in fd.iter().zip(&an) {
            assert!((a - b).abs() < 1e-7);
        }
        let outside = state(vec![0.2, 0.2]);
        let phi = assemble_phi(&outside, &ctx, 0.0, &[0.0]);
        assert!(matches!(
            phi.assemble_psi(0.0, &outside.w),
            Err(BarrierError::LeftFeasibleRegion { index: 4, .. })
        ));
    }

    #[test]
    fn adaptation_law_toy() {
        // Φ = ½(w − x)², f = 0, g = 1, P = [p].
        let (w, x, p) = (0.7, 0.2, 3.0);
        let (mu, nu) = adaptation_law(
            &Matrix::diag(&[p]),
            &[w - x],
            &Matrix::identity(1),
            &Matrix::from_rows(&[vec![-1.0]]),
            &[0.0],
            &[0.0],
            &Matrix::identity(1),
        )
        .unwrap();
        assert!((nu[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((mu[0] + p * (w - x)).abs() < 1e-15);
        // At the stationary point of a static Φ both vanish.
        let (mu, nu) = adaptation_law(
            &Matrix::identity(1),
            &[0.0],
            &Matrix::identity(1),
            &Matrix::zeros(1, 1),
            &[0.0],
            &[1.0],
            &Matrix::identity(1),
        )
        .unwrap();
        assert_eq!((mu[0], nu[(0, 0)]), (0.0, 0.0));
    }

    #[test]
    fn mu_nu_vanish_without_drive() {
        // With no input authority ν = 0.
        let cons = bounds_1d();
        let sys = ControlAffineSystem::new(1, 1, |_| vec![0.0], |_| Matrix::zeros(1, 1), vec![1.0]);
        let ctx = context(&cons, &sys, 1.0);
        let ws = state(vec![3.0, 3.0]);
        let out = compute_mu_nu(&ws, &ctx, 0.0, &[0.0]).unwrap();
        assert!(out.nu.max_abs() < 1e-12);
        // Symmetric state, symmetric weights: μ is symmetric.
        assert!((out.mu[0] - out.mu[1]).abs() < 1e-9);
        assert!(out.b_ccbf() < 0.0);
    }

    #[test]
    fn filter_examples() {
        let mut ws = state(vec![1.0]).with_tau(0.01);
        let mu = vec![2.0];
        let nu = Matrix::from_rows(&[vec![-1.0]]);
        ws.mu_f = mu.clone();
        ws.nu_f = nu.clone();
        update_filters(&mut ws, &mu, &nu, 0.01);
        assert_eq!(ws.mu_f, mu);
        ws.mu_f = vec![0.0];
        ws.nu_f = Matrix::zeros(1, 1);
        update_filters(&mut ws, &mu, &nu, 0.01);
        let blend = 1.0 - (-1.0f64).exp();
        assert!((ws.mu_f[0] - 2.0 * blend).abs() < 1e-15);
        assert!((ws.nu_f[(0, 0)] + blend).abs() < 1e-15);
        for _ in 0..100 {
            update_filters(&mut ws, &mu, &nu, 0.01);
        }
        assert!((ws.mu_f[0] - 2.0).abs() < 2.0 * (-100.0f64).exp() + 1e-15);
    }

    #[test]
    fn filter_margin_examples() {
        let mut d = zero_derivs(0.5, 1, 1);
        d.d_dw = vec![0.0];
        let mut ws = state(vec![1.0]);
        ws.mu_f = vec![5.0];
        let nu = Matrix::zeros(1, 1);
        let m = monitor_filter_margins(&d, &ws, &[1.0], &nu, &[1.0]);
        assert_eq!(m.lhs_mu, 0.0);
        ws.mu_f = vec![1.0];
        d.d_dw = vec![-0.3];
        let m = monitor_filter_margins(&d, &ws, &[1.0], &nu, &[1.0]);
        assert_eq!((m.lhs_mu, m.lhs_nu, m.ok), (0.0, 0.0, true));
    }

    #[test]
    fn filter_margin_matches_grid_supremum() {
        let mut d = zero_derivs(0.5, 2, 2);
        d.p_h = vec![-0.4, -0.1];
        d.p_w = vec![-0.2, -0.6];
        d.d_dw = vec![0.2, 0.6];
        d.l_g = Matrix::from_rows(&[vec![1.0, -0.5], vec![0.3, 2.0]]);
        let mut ws = WeightState::new(vec![1.0, 1.0], 0.01, 50.0, 1e3, Matrix::identity(2), 2);
        ws.nu_f = Matrix::from_rows(&[vec![0.1, 0.4], vec![-0.3, 0.2]]);
        let nu = Matrix::from_rows(&[vec![0.5, -0.2], vec![0.0, 0.7]]);
        let u_max = [1.0, 0.5];
        let m = monitor_filter_margins(&d, &ws, &[0.0, 0.0], &nu, &u_max);
        let row = |nu: &Matrix| {
            let a = d.d_dx_g();
            let b = nu.tr_mul_vec(&d.d_dw);
            vec![a[0] + b[0], a[1] + b[1]]
        };
        let sup_grid = |r: &[f64]| {
            let mut best = f64::NEG_INFINITY;
            for i in 0..=2000 {
                for j in 0..=1000 {
                    let u = [-1.0 + 0.001 * f64::from(i), -0.5 + 0.001 * f64::from(j)];
                    best = best.max(r[0] * u[0] + r[1] * u[1]);
                }
            }
            best
        };
        let grid = sup_grid(&row(&ws.nu_f)) - sup_grid(&row(&nu));
        assert!((grid - m.lhs_nu).abs() < 1e-9);
    }

    #[test]
    fn initialization_returns_interior_guess_unchanged() {
        let cons = bounds_1d();
        let sys = plant();
        let ctx = context(&cons, &sys, 1.0);
        let ws = state(vec![3.0, 3.0]);
        assert_eq!(initialize_weights(&[3.0, 3.0], &ws, &ctx, 0.0, &[0.0], 10.0).unwrap(), vec![3.0, 3.0]);
        assert!(matches!(
            initialize_weights(&[0.01, 3.0], &ws, &ctx, 0.0, &[0.0], 10.0),
            Err(AdaptationError::GuessOutsideBounds { index: 0, .. })
        ));
    }

    #[test]
    fn initialization_moves_infeasible_guess_inside() {
        let cons = bounds_1d();
        let sys = plant();
        let ctx = context(&cons, &sys, 1.0);
        let ws = state(vec![0.2, 0.2]);
        assert!(!weights_interior(&ws, &ctx, 0.0, &[0.0], &ws.w));
        let w0 = initialize_weights(&ws.w, &ws, &ctx, 0.0, &[0.0], 50.0).unwrap();
        assert!(weights_interior(&ws, &ctx, 0.0, &[0.0], &w0), "{w0:?}");
        assert!((w0[0] - w0[1]).abs() < 1e-6);
    }

    #[test]
    fn weight_step_stays_interior() {
        let cons = bounds_1d();
        let sys = plant();
        let ctx = context(&cons, &sys, 1.0);
        let ws = state(vec![2.38, 2.38]);
        let w1 = step_weights(&ws, &ctx, 0.0, &[0.0], &[0.5], 0.01).unwrap();
        assert!(w1.iter().all(|w| *w > ws.w_min && *w < ws.w_max));
        assert!(weights_interior(&ws, &ctx, 0.01, &[0.0], &w1));
    }
}
