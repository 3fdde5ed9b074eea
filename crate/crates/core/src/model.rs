//! Control-affine systems, constraint functions and the consolidated CBF.
//!
//! The consolidated candidate is
//!
//! ```text
//! H(t, w, x) = 1 − Σ_i φ(h_i(t, x), w_i)
//! ```
//!
//! where `φ` is a class-LL kernel with `φ(r, 0) = φ(0, s) = 1`. Its zero
//! super-level set sits inside the intersection of all `h_i ≥ 0` whenever the
//! weights are positive.

use std::fmt;
use std::sync::Arc;

use crate::numerics::{dot, Matrix};

pub type DriftFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type InputMapFn = Arc<dyn Fn(&[f64]) -> Matrix + Send + Sync>;
pub type TimeScalarFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type TimeVectorFn = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;
pub type TimeMatrixFn = Arc<dyn Fn(f64, &[f64]) -> Matrix + Send + Sync>;

/// `ẋ = f(x) + g(x) u` with the box input set `|u_j| ≤ ū_j`.
#[derive(Clone)]
pub struct ControlAffineSystem {
    n: usize,
    m: usize,
    drift: DriftFn,
    input_map: InputMapFn,
    u_max: Vec<f64>,
}

impl ControlAffineSystem {
    pub fn new(
        n: usize,
        m: usize,
        drift: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        input_map: impl Fn(&[f64]) -> Matrix + Send + Sync + 'static,
        u_max: Vec<f64>,
    ) -> Self {
        assert_eq!(u_max.len(), m, "one bound per input");
        assert!(
            u_max.iter().all(|u| u.is_finite() && *u > 0.0),
            "input bounds must be finite and positive"
        );
        Self {
            n,
            m,
            drift: Arc::new(drift),
            input_map: Arc::new(input_map),
            u_max,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn u_max(&self) -> &[f64] {
        &self.u_max
    }

    pub fn u_min(&self) -> Vec<f64> {
        self.u_max.iter().map(|u| -u).collect()
    }

    pub fn f(&self, x: &[f64]) -> Vec<f64> {
        (self.drift)(x)
    }

    /// `n × m` input matrix.
    pub fn g(&self, x: &[f64]) -> Matrix {
        (self.input_map)(x)
    }

    pub fn dynamics(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let gu = self.g(x).mul_vec(u);
        self.f(x).iter().zip(gu).map(|(a, b)| a + b).collect()
    }

    pub fn clip_input(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.u_max).map(|(v, b)| v.clamp(-b, *b)).collect()
    }
}

impl fmt::Debug for ControlAffineSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlAffineSystem")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("u_max", &self.u_max)
            .finish_non_exhaustive()
    }
}

/// One constraint `h(t, x) ≥ 0` with its analytic partials.
#[derive(Clone)]
pub struct ConstraintSpec {
    pub name: String,
    h: TimeScalarFn,
    dh_dt: TimeScalarFn,
    grad_x: TimeVectorFn,
    hess_xx: Option<TimeMatrixFn>,
    pub relative_degree: u32,
}

impl ConstraintSpec {
    pub fn new(
        name: impl Into<String>,
        h: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        dh_dt: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        grad_x: impl Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            h: Arc::new(h),
            dh_dt: Arc::new(dh_dt),
            grad_x: Arc::new(grad_x),
            hess_xx: None,
            relative_degree: 1,
        }
    }

    pub fn with_hess(mut self, hess: impl Fn(f64, &[f64]) -> Matrix + Send + Sync + 'static) -> Self {
        self.hess_xx = Some(Arc::new(hess));
        self
    }

    pub fn with_relative_degree(mut self, r: u32) -> Self {
        assert!(r >= 1);
        self.relative_degree = r;
        self
    }

    pub fn h(&self, t: f64, x: &[f64]) -> f64 {
        (self.h)(t, x)
    }

    pub fn dh_dt(&self, t: f64, x: &[f64]) -> f64 {
        (self.dh_dt)(t, x)
    }

    pub fn grad_x(&self, t: f64, x: &[f64]) -> Vec<f64> {
        (self.grad_x)(t, x)
    }

    pub fn hess_xx(&self, t: f64, x: &[f64]) -> Option<Matrix> {
        self.hess_xx.as_ref().map(|h| h(t, x))
    }

    pub fn has_hess(&self) -> bool {
        self.hess_xx.is_some()
    }
}

impl fmt::Debug for ConstraintSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConstraintSpec")
            .field("name", &self.name)
            .field("relative_degree", &self.relative_degree)
            .field("has_hess", &self.has_hess())
            .finish_non_exhaustive()
    }
}

/// Class-LL kernel `φ(r, s)` used to consolidate constraints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhiKernel {
    /// `φ(r, s) = e^{−rs}`
    Exponential,
    /// `φ(r, s) = v / (rs + v)`, singular where `rs = −v`.
    Reciprocal { v: f64 },
}

impl PhiKernel {
    pub fn value(&self, r: f64, s: f64) -> f64 {
        match *self {
            PhiKernel::Exponential => (-r * s).exp(),
            PhiKernel::Reciprocal { v } => v / (r * s + v),
        }
    }

    /// `∂φ/∂r`
    pub fn dr(&self, r: f64, s: f64) -> f64 {
        match *self {
            PhiKernel::Exponential => -s * (-r * s).exp(),
            PhiKernel::Reciprocal { v } => -v * s / (r * s + v).powi(2),
        }
    }

    /// `∂φ/∂s`
    pub fn ds(&self, r: f64, s: f64) -> f64 {
        match *self {
            PhiKernel::Exponential => -r * (-r * s).exp(),
            PhiKernel::Reciprocal { v } => -v * r / (r * s + v).powi(2),
        }
    }

    pub fn drr(&self, r: f64, s: f64) -> f64 {
        match *self {
            PhiKernel::Exponential => s * s * (-r * s).exp(),
            PhiKernel::Reciprocal { v } => 2.0 * v * s * s / (r * s + v).powi(3),
        }
    }

    pub fn dss(&self, r: f64, s: f64) -> f64 {
        match *self {
            PhiKernel::Exponential => r * r * (-r * s).exp(),
            PhiKernel::Reciprocal { v } => 2.0 * v * r * r / (r * s + v).powi(3),
        }
    }

    pub fn drs(&self, r: f64, s: f64) -> f64 {
        match *self {
            PhiKernel::Exponential => (r * s - 1.0) * (-r * s).exp(),
            PhiKernel::Reciprocal { v } => v * (r * s - v) / (r * s + v).powi(3),
        }
    }

    /// `∂³φ/∂r∂s²`, used for the analytic weight Hessian of the feasibility row.
    pub fn drss(&self, r: f64, s: f64) -> f64 {
        match *self {
            PhiKernel::Exponential => (2.0 * r - r * r * s) * (-r * s).exp(),
            PhiKernel::Reciprocal { v } => {
                let d = r * s + v;
                4.0 * v * r / d.powi(3) - 6.0 * v * r * r * s / d.powi(4)
            }
        }
    }

    /// `∂³φ/∂s³`
    pub fn dsss(&self, r: f64, s: f64) -> f64 {
        match *self {
            PhiKernel::Exponential => -r * r * r * (-r * s).exp(),
            PhiKernel::Reciprocal { v } => -6.0 * v * r.powi(3) / (r * s + v).powi(4),
        }
    }
}

/// Locally Lipschitz class-K∞ function `α`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassK {
    /// `α(h) = k·h`
    Linear(f64),
    /// `α(h) = γ·h³`
    Cubic(f64),
}

impl ClassK {
    pub fn eval(&self, h: f64) -> f64 {
        match *self {
            ClassK::Linear(k) => k * h,
            ClassK::Cubic(g) => g * h * h * h,
        }
    }

    pub fn deriv(&self, h: f64) -> f64 {
        match *self {
            ClassK::Linear(k) => k,
            ClassK::Cubic(g) => 3.0 * g * h * h,
        }
    }

    pub fn second_deriv(&self, h: f64) -> f64 {
        match *self {
            ClassK::Linear(_) => 0.0,
            ClassK::Cubic(g) => 6.0 * g * h,
        }
    }
}

/// `H` and every partial the adaptation law and controllers need.
#[derive(Debug, Clone)]
pub struct CcbfDerivatives {
    /// `H(t, w, x)`
    pub value: f64,
    pub d_dt: f64,
    /// `∂H/∂x`, length `n`.
    pub d_dx: Vec<f64>,
    /// `∂H/∂w`, length `c`; equals `−p_w`.
    pub d_dw: Vec<f64>,
    /// `∂φ/∂r` at `(h_i, w_i)`.
    pub p_h: Vec<f64>,
    /// `∂φ/∂s` at `(h_i, w_i)`.
    pub p_w: Vec<f64>,
    /// `∂²φ/∂r∂s` at `(h_i, w_i)`.
    pub p_hw: Vec<f64>,
    /// `∂²φ/∂s²` at `(h_i, w_i)`.
    pub p_ww: Vec<f64>,
    /// `∂h_i/∂t`
    pub l_t: Vec<f64>,
    /// `∇h_i · f(x)`
    pub l_f: Vec<f64>,
    /// Rows `∇h_iᵀ g(x)`, `c × m`.
    pub l_g: Matrix,
    /// Constituent values `h_i(t, x)`.
    pub h: Vec<f64>,
}

impl CcbfDerivatives {
    /// `(∂H/∂x) g(x)` as an `m`-vector, i.e. `−L_gᵀ p_h`.
    pub fn d_dx_g(&self) -> Vec<f64> {
        self.l_g.tr_mul_vec(&self.p_h).iter().map(|v| -v).collect()
    }

    /// `(∂H/∂x) f(x) = −p_h · L_f`
    pub fn d_dx_f(&self) -> f64 {
        -dot(&self.p_h, &self.l_f)
    }
}

pub fn constraint_values(constraints: &[ConstraintSpec], t: f64, x: &[f64]) -> Vec<f64> {
    constraints.iter().map(|c| c.h(t, x)).collect()
}

/// `H = 1 − Σ φ(h_i(t,x), w_i)`
pub fn ccbf_value(kernel: PhiKernel, constraints: &[ConstraintSpec], t: f64, w: &[f64], x: &[f64]) -> f64 {
    assert_eq!(w.len(), constraints.len(), "one weight per constraint");
    1.0 - constraints
        .iter()
        .zip(w)
        .map(|(c, wi)| kernel.value(c.h(t, x), *wi))
        .sum::<f64>()
}

pub fn ccbf_derivatives(
    kernel: PhiKernel,
    constraints: &[ConstraintSpec],
    system: &ControlAffineSystem,
    t: f64,
    w: &[f64],
    x: &[f64],
) -> CcbfDerivatives {
    let c = constraints.len();
    assert_eq!(w.len(), c, "one weight per constraint");
    let f = system.f(x);
    let g = system.g(x);
    let mut d = CcbfDerivatives {
        value: 1.0,
        d_dt: 0.0,
        d_dx: vec![0.0; system.n()],
        d_dw: vec![0.0; c],
        p_h: vec![0.0; c],
        p_w: vec![0.0; c],
        p_hw: vec![0.0; c],
        p_ww: vec![0.0; c],
        l_t: vec![0.0; c],
        l_f: vec![0.0; c],
        l_g: Matrix::zeros(c, system.m()),
        h: vec![0.0; c],
    };
    for (i, (con, wi)) in constraints.iter().zip(w).enumerate() {
        let hi = con.h(t, x);
        let grad = con.grad_x(t, x);
        d.h[i] = hi;
        d.value -= kernel.value(hi, *wi);
        d.p_h[i] = kernel.dr(hi, *wi);
        d.p_w[i] = kernel.ds(hi, *wi);
        d.p_hw[i] = kernel.drs(hi, *wi);
        d.p_ww[i] = kernel.dss(hi, *wi);
        d.l_t[i] = con.dh_dt(t, x);
        d.l_f[i] = dot(&grad, &f);
        let lg = g.tr_mul_vec(&grad);
        for (k, v) in lg.iter().enumerate() {
            d.l_g[(i, k)] = *v;
        }
        for (dx, gx) in d.d_dx.iter_mut().zip(&grad) {
            *dx -= d.p_h[i] * gx;
        }
        d.d_dw[i] = -d.p_w[i];
    }
    d.d_dt = -dot(&d.p_h, &d.l_t);
    d
}

/// True iff every `h_i(t, x) ≥ 0`.
pub fn in_complete_constraint_set(constraints: &[ConstraintSpec], t: f64, x: &[f64]) -> bool {
    constraints.iter().all(|c| c.h(t, x) >= 0.0)
}
