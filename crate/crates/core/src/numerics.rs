//! Dense numerical plumbing shared by the barrier flows and controllers.
//!
//! Everything here works on small problems (a handful of states, weights and
//! inputs), so the routines favour exactness and clear failure modes over
//! asymptotic speed.

use std::fmt;
use std::ops::{Index, IndexMut};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("integration diverged at t = {t}")]
    IntegrationDiverged { t: f64 },
    #[error("non-finite function value on the difference stencil of component {component}")]
    NonFiniteStencil { component: usize },
    #[error("matrix is not symmetric: |M[{row},{col}] - M[{col},{row}]| = {gap:e}")]
    Asymmetric { row: usize, col: usize, gap: f64 },
    #[error("singular linear system: pivot {pivot:e} in column {column}")]
    Singular { pivot: f64, column: usize },
    #[error("infeasible QP, conflicting rows {conflicting:?}")]
    Infeasible { conflicting: Vec<usize> },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, scale: f64) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = scale;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    /// Builds a matrix from rows; all rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn from_row_slice(rows: usize, cols: usize, data: &[f64]) -> Self {
        assert_eq!(rows * cols, data.len());
        Self {
            rows,
            cols,
            data: data.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `self * v`
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ * v`
    pub fn tr_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn scale(&self, k: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn add_scaled_identity(&self, t: f64) -> Matrix {
        let mut m = self.clone();
        for i in 0..self.rows.min(self.cols) {
            m[(i, i)] += t;
        }
        m
    }

    /// `(M + Mᵀ) / 2`
    pub fn symmetrized(&self) -> Matrix {
        assert_eq!(self.rows, self.cols);
        let mut m = self.clone();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let avg = 0.5 * (self[(i, j)] + self[(j, i)]);
                m[(i, j)] = avg;
                m[(j, i)] = avg;
            }
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<&[f64]> = (0..self.rows).map(|i| self.row(i)).collect();
        f.debug_struct("Matrix")
            .field("shape", &(self.rows, self.cols))
            .field("rows", &rows)
            .finish()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// `a + k * b`
pub fn axpy(a: &[f64], k: f64, b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + k * y).collect()
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// One classical Runge-Kutta step of size `h` for a fallible field.
pub fn rk4_step<F, E>(field: &mut F, t: f64, y: &[f64], h: f64) -> Result<Vec<f64>, E>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>, E>,
{
    let k1 = field(t, y)?;
    let k2 = field(t + 0.5 * h, &axpy(y, 0.5 * h, &k1))?;
    let k3 = field(t + 0.5 * h, &axpy(y, 0.5 * h, &k2))?;
    let k4 = field(t + h, &axpy(y, h, &k3))?;
    Ok(y
        .iter()
        .enumerate()
        .map(|(i, yi)| yi + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Fixed-step RK4 from `t0` to `t1`; the last step is shortened to land on `t1`.
pub fn integrate_rk4<F>(
    mut field: F,
    y0: &[f64],
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<Vec<f64>, NumericsError>
where
    F: FnMut(f64, &[f64]) -> Vec<f64>,
{
    assert!(dt > 0.0 && t1 >= t0, "need dt > 0 and t1 >= t0");
    let mut checked = |t: f64, y: &[f64]| {
        let v = field(t, y);
        if all_finite(&v) {
            Ok(v)
        } else {
            Err(NumericsError::IntegrationDiverged { t })
        }
    };
    let mut y = y0.to_vec();
    let mut t = t0;
    // Steps are counted rather than accumulated so rounding never adds a sliver step.
    let full = ((t1 - t0) / dt * (1.0 + 1e-12)).floor() as usize;
    for k in 0..full {
        let tk = t0 + k as f64 * dt;
        y = rk4_step(&mut checked, tk, &y, dt)?;
        t = tk + dt;
    }
    let rest = t1 - t;
    if rest > 1e-12 * dt.max(1.0) {
        y = rk4_step(&mut checked, t, &y, rest)?;
    }
    if !all_finite(&y) {
        return Err(NumericsError::IntegrationDiverged { t: t1 });
    }
    Ok(y)
}

fn stencil_step(eps: f64, yi: f64) -> f64 {
    eps * (1.0 + yi.abs())
}

/// Central-difference gradient with per-component step `eps * (1 + |y_i|)`.
pub fn finite_diff_gradient<F>(f: F, y: &[f64], eps: f64) -> Result<Vec<f64>, NumericsError>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(eps > 0.0);
    let mut probe = y.to_vec();
    let mut grad = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        let h = stencil_step(eps, y[i]);
        probe[i] = y[i] + h;
        let fp = f(&probe);
        probe[i] = y[i] - h;
        let fm = f(&probe);
        probe[i] = y[i];
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(NumericsError::NonFiniteStencil { component: i });
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Central-difference Jacobian of a vector field, `J[i][j] = ∂F_i/∂y_j`.
pub fn finite_diff_jacobian<F>(f: F, y: &[f64], eps: f64) -> Result<Matrix, NumericsError>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut probe = y.to_vec();
    let mut jac: Option<Matrix> = None;
    for j in 0..y.len() {
        let h = stencil_step(eps, y[j]);
        probe[j] = y[j] + h;
        let fp = f(&probe);
        probe[j] = y[j] - h;
        let fm = f(&probe);
        probe[j] = y[j];
        if !(all_finite(&fp) && all_finite(&fm)) {
            return Err(NumericsError::NonFiniteStencil { component: j });
        }
        let m = jac.get_or_insert_with(|| Matrix::zeros(fp.len(), y.len()));
        for i in 0..fp.len() {
            m[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    Ok(jac.unwrap_or_else(|| Matrix::zeros(0, 0)))
}

/// Central-difference Hessian, explicitly symmetrized.
pub fn finite_diff_hessian<F>(f: F, y: &[f64], eps: f64) -> Result<Matrix, NumericsError>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(eps > 0.0);
    let n = y.len();
    let mut probe = y.to_vec();
    let f0 = f(y);
    if !f0.is_finite() {
        return Err(NumericsError::NonFiniteStencil { component: 0 });
    }
    let steps: Vec<f64> = y.iter().map(|v| stencil_step(eps, *v)).collect();
    let mut hess = Matrix::zeros(n, n);
    let eval = |probe: &[f64], component: usize| {
        let v = f(probe);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(NumericsError::NonFiniteStencil { component })
        }
    };
    for i in 0..n {
        let hi = steps[i];
        probe[i] = y[i] + hi;
        let fp = eval(&probe, i)?;
        probe[i] = y[i] - hi;
        let fm = eval(&probe, i)?;
        probe[i] = y[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (hi * hi);
        for j in (i + 1)..n {
            let hj = steps[j];
            let mut corner = |si: f64, sj: f64| {
                probe[i] = y[i] + si * hi;
                probe[j] = y[j] + sj * hj;
                let v = eval(&probe, i);
                probe[i] = y[i];
                probe[j] = y[j];
                v
            };
            let fpp = corner(1.0, 1.0)?;
            let fpm = corner(1.0, -1.0)?;
            let fmp = corner(-1.0, 1.0)?;
            let fmm = corner(-1.0, -1.0)?;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * hi * hj);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok(hess.symmetrized())
}

fn check_symmetric(m: &Matrix) -> Result<(), NumericsError> {
    if m.rows() != m.cols() {
        return Err(NumericsError::Dimension(format!(
            "expected square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let scale = m.max_abs().max(1.0);
    for i in 0..m.rows() {
        for j in (i + 1)..m.cols() {
            let gap = (m[(i, j)] - m[(j, i)]).abs();
            if gap > 1e-8 * scale {
                return Err(NumericsError::Asymmetric { row: i, col: j, gap });
            }
        }
    }
    Ok(())
}

/// All eigenvalues of a symmetric matrix, ascending (cyclic Jacobi).
pub fn symmetric_eigenvalues(m: &Matrix) -> Result<Vec<f64>, NumericsError> {
    check_symmetric(m)?;
    let n = m.rows();
    let mut a = m.symmetrized();
    let total: f64 = a.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    eig.sort_by(|x, y| x.total_cmp(y));
    Ok(eig)
}

pub fn min_eigenvalue_symmetric(m: &Matrix) -> Result<f64, NumericsError> {
    let eig = symmetric_eigenvalues(m)?;
    Ok(eig.first().copied().unwrap_or(f64::INFINITY))
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn solve_linear(a: &Matrix, b: &[f64]) -> Result<Vec<f64>, NumericsError> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(NumericsError::Dimension(format!(
            "system {}x{} with rhs of length {}",
            a.rows(),
            a.cols(),
            b.len()
        )));
    }
    let scale = a.max_abs().max(1.0);
    let mut m = a.clone();
    let mut x = b.to_vec();
    for col in 0..n {
        let (piv, pmax) = (col..n)
            .map(|r| (r, m[(r, col)].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pmax < 1e-12 * scale {
            return Err(NumericsError::Singular {
                pivot: pmax,
                column: col,
            });
        }
        if piv != col {
            for j in 0..n {
                let tmp = m[(col, j)];
                m[(col, j)] = m[(piv, j)];
                m[(piv, j)] = tmp;
            }
            x.swap(col, piv);
        }
        let d = m[(col, col)];
        for r in (col + 1)..n {
            let factor = m[(r, col)] / d;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                m[(r, j)] -= factor * m[(col, j)];
            }
            x[r] -= factor * x[col];
        }
    }
    for i in (0..n).rev() {
        let mut acc = x[i];
        for j in (i + 1)..n {
            acc -= m[(i, j)] * x[j];
        }
        x[i] = acc / m[(i, i)];
    }
    Ok(x)
}

/// Affine inequality `offset + normal · u >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpRow {
    pub offset: f64,
    pub normal: Vec<f64>,
}

impl QpRow {
    pub fn new(offset: f64, normal: Vec<f64>) -> Self {
        Self { offset, normal }
    }

    pub fn eval(&self, u: &[f64]) -> f64 {
        self.offset + dot(&self.normal, u)
    }
}

/// Identifies one constraint of a box QP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QpConstraint {
    Lower(usize),
    Upper(usize),
    Row(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: Vec<f64>,
    pub active: Vec<QpConstraint>,
    pub multipliers: Vec<f64>,
    /// Max of stationarity, primal and dual residuals at the returned point.
    pub kkt_residual: f64,
}

const QP_TOL: f64 = 1e-12;

fn box_constraints(lo: &[f64], hi: &[f64], rows: &[QpRow]) -> Vec<(QpConstraint, QpRow)> {
    let m = lo.len();
    let mut all = Vec::with_capacity(2 * m + rows.len());
    for j in 0..m {
        let mut e = vec![0.0; m];
        e[j] = 1.0;
        all.push((QpConstraint::Lower(j), QpRow::new(-lo[j], e.clone())));
        e[j] = -1.0;
        all.push((QpConstraint::Upper(j), QpRow::new(hi[j], e)));
    }
    for (i, r) in rows.iter().enumerate() {
        all.push((QpConstraint::Row(i), r.clone()));
    }
    all
}

fn feasibility_tol(row: &QpRow, u: &[f64]) -> f64 {
    QP_TOL * (1.0 + row.offset.abs() + norm(&row.normal) * (1.0 + norm(u)))
}

fn subsets(n: usize, k: usize, mut visit: impl FnMut(&[usize])) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
        if cur.len() == k {
            visit(cur);
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, visit);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::new(), &mut visit);
}

/// Enumerates active sets and returns the best KKT point, if any.
fn enumerate_kkt(u0: &[f64], cons: &[(QpConstraint, QpRow)]) -> Option<QpSolution> {
    let m = u0.len();
    let mut best: Option<(f64, QpSolution)> = None;
    for k in 0..=m.min(cons.len()) {
        subsets(cons.len(), k, |set| {
            let g = Matrix::from_rows(
                &set.iter()
                    .map(|&i| set.iter().map(|&j| dot(&cons[i].1.normal, &cons[j].1.normal)).collect())
                    .collect::<Vec<Vec<f64>>>(),
            );
            let rhs: Vec<f64> = set.iter().map(|&i| -cons[i].1.eval(u0)).collect();
            let lambda = if k == 0 {
                Vec::new()
            } else {
                match solve_linear(&g, &rhs) {
                    Ok(l) => l,
                    Err(_) => return,
                }
            };
            if lambda.iter().any(|l| *l < -QP_TOL * (1.0 + norm(u0))) {
                return;
            }
            let mut u = u0.to_vec();
            for (l, &i) in lambda.iter().zip(set) {
                for (uj, bj) in u.iter_mut().zip(&cons[i].1.normal) {
                    *uj += l * bj;
                }
            }
            if cons.iter().any(|(_, r)| r.eval(&u) < -feasibility_tol(r, &u)) {
                return;
            }
            let obj = 0.5 * u.iter().zip(u0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                best = Some((
                    obj,
                    QpSolution {
                        u,
                        active: set.iter().map(|&i| cons[i].0).collect(),
                        multipliers: lambda.iter().map(|l| l.max(0.0)).collect(),
                        kkt_residual: 0.0,
                    },
                ));
            }
        });
    }
    best.map(|(_, s)| s)
}

fn kkt_residual(u0: &[f64], sol: &QpSolution, cons: &[(QpConstraint, QpRow)]) -> f64 {
    let lookup = |c: QpConstraint| &cons.iter().find(|(id, _)| *id == c).expect("active id").1;
    let mut stat: Vec<f64> = sol.u.iter().zip(u0).map(|(a, b)| a - b).collect();
    let mut comp: f64 = 0.0;
    for (c, l) in sol.active.iter().zip(&sol.multipliers) {
        let row = lookup(*c);
        for (s, b) in stat.iter_mut().zip(&row.normal) {
            *s -= l * b;
        }
        comp = comp.max((l * row.eval(&sol.u)).abs());
    }
    let primal = cons
        .iter()
        .map(|(_, r)| (-r.eval(&sol.u)).max(0.0))
        .fold(0.0, f64::max);
    norm_inf(&stat).max(comp).max(primal)
}

/// Exact minimizer of `½‖u − u0‖²` over `lo ≤ u ≤ hi` and `offset + normal·u ≥ 0` rows.
///
/// Small problems only: every active set of size at most `m` is enumerated
/// and the lowest-objective KKT point is returned.
pub fn solve_box_qp(
    u0: &[f64],
    lo: &[f64],
    hi: &[f64],
    rows: &[QpRow],
) -> Result<QpSolution, NumericsError> {
    let m = u0.len();
    if lo.len() != m || hi.len() != m || rows.iter().any(|r| r.normal.len() != m) {
        return Err(NumericsError::Dimension("box QP operands disagree on m".into()));
    }
    assert!(lo.iter().zip(hi).all(|(l, h)| l <= h), "lo must not exceed hi");
    let cons = box_constraints(lo, hi, rows);
    match enumerate_kkt(u0, &cons) {
        Some(mut sol) => {
            for (u, (l, h)) in sol.u.iter_mut().zip(lo.iter().zip(hi)) {
                *u = u.clamp(*l, *h);
            }
            sol.kkt_residual = kkt_residual(u0, &sol, &cons);
            Ok(sol)
        }
        None => Err(NumericsError::Infeasible {
            conflicting: conflicting_rows(lo, hi, rows),
        }),
    }
}

/// Smallest subset of rows (up to three) that is infeasible together with the box.
fn conflicting_rows(lo: &[f64], hi: &[f64], rows: &[QpRow]) -> Vec<usize> {
    let center: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect();
    for k in 1..=rows.len().min(3) {
        let mut found = None;
        subsets(rows.len(), k, |set| {
            if found.is_some() {
                return;
            }
            let sub: Vec<QpRow> = set.iter().map(|&i| rows[i].clone()).collect();
            if enumerate_kkt(&center, &box_constraints(lo, hi, &sub)).is_none() {
                found = Some(set.to_vec());
            }
        });
        if let Some(set) = found {
            return set;
        }
    }
    (0..rows.len()).collect()
}
