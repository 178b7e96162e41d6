//! Dense symmetric kernels used by the fold machinery: upper-triangular
//! Cholesky factorization, rank-one updates and downdates, triangular
//! solves, and solves against factors that refused some downdates.
//!
//! A downdate that would destroy positive definiteness must not corrupt
//! the factor: the attempt is probed first and the factor is only written
//! once every hyperbolic rotation is known to exist. Refused downdate
//! directions are collected in a [`DowndateLedger`] and handled at solve
//! time through the Woodbury identity, so an indefinite fold Hessian is
//! still solvable as long as it is nonsingular.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use thiserror::Error;

/// Relative pivot floor for downdates: a rotation is refused when the
/// downdated squared diagonal falls below this fraction of its current
/// squared value.
pub const DOWNDATE_EPS: f64 = 1e-12;

/// Relative pivot floor for the dense solve of the low-rank correction
/// system inside [`DowndateLedger::solve`].
const CORRECTION_PIVOT_EPS: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix not positive definite at column {col} (pivot {pivot:.3e})")]
    NotPositiveDefinite { col: usize, pivot: f64 },
    #[error("rank-one downdate refused at row {row} (factor left unchanged)")]
    DowndateFailure { row: usize },
    #[error("low-rank correction system is numerically singular")]
    SingularCorrection,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Upper-triangular Cholesky factor `R` with `R' R = A`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    r: Array2<f64>,
    p: usize,
}

impl CholeskyFactor {
    /// Factorizes a symmetric positive definite matrix, reading its upper
    /// triangle. Fails on the first nonpositive (or nonfinite) pivot.
    pub fn new(a: ArrayView2<f64>) -> Result<Self, LinalgError> {
        let p = a.nrows();
        if a.ncols() != p {
            return Err(LinalgError::DimensionMismatch { expected: p, got: a.ncols() });
        }
        let mut r = Array2::<f64>::zeros((p, p));
        for i in 0..p {
            for j in i..p {
                let mut s = a[[i, j]];
                for k in 0..i {
                    s -= r[[k, i]] * r[[k, j]];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(LinalgError::NotPositiveDefinite { col: i, pivot: s });
                    }
                    r[[i, i]] = s.sqrt();
                } else {
                    r[[i, j]] = s / r[[i, i]];
                }
            }
        }
        Ok(CholeskyFactor { r, p })
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn r(&self) -> ArrayView2<'_, f64> {
        self.r.view()
    }

    /// log det of the factored matrix A = R'R.
    pub fn log_det(&self) -> f64 {
        (0..self.p).map(|i| 2.0 * self.r[[i, i]].ln()).sum()
    }

    /// Rank-one update (`up = true`, never fails) or downdate of the
    /// factored matrix by `u u'`. On a refused downdate the factor and `u`
    /// are left exactly as they were.
    pub fn rank_one(&self, u: ArrayView1<f64>, up: bool) -> Result<Self, LinalgError> {
        let mut out = self.clone();
        let mut work = u.to_vec();
        out.rank_one_inplace(&mut work, up)?;
        Ok(out)
    }

    /// In-place rank-one update/downdate; `u` is used as workspace. The
    /// factor and `u` are untouched when the downdate is refused.
    pub fn rank_one_inplace(&mut self, u: &mut [f64], up: bool) -> Result<(), LinalgError> {
        let p = self.p;
        if u.len() != p {
            return Err(LinalgError::DimensionMismatch { expected: p, got: u.len() });
        }
        let r = self.r.as_slice_mut().expect("factor is contiguous");
        if up {
            // Givens rotations against the appended row u'.
            for j in 0..p {
                let uj = u[j];
                if uj == 0.0 {
                    continue;
                }
                let rjj = r[j * p + j];
                let rad = rjj.hypot(uj);
                let c = rjj / rad;
                let s = uj / rad;
                r[j * p + j] = rad;
                let row = &mut r[j * p + j + 1..(j + 1) * p];
                for (k, rjk) in row.iter_mut().enumerate() {
                    let t = *rjk;
                    let uk = u[j + 1 + k];
                    *rjk = c * t + s * uk;
                    u[j + 1 + k] = c * uk - s * t;
                }
            }
            return Ok(());
        }
        // Downdate via hyperbolic rotations. First pass only probes the
        // pivots (it reads R and evolves a copy of u), so a refusal leaves
        // the factor bit-for-bit intact.
        let mut w = u.to_vec();
        for j in 0..p {
            let wj = w[j];
            if wj == 0.0 {
                continue;
            }
            let rjj = r[j * p + j];
            let arg = rjj * rjj - wj * wj;
            if !(arg > DOWNDATE_EPS * rjj * rjj) {
                return Err(LinalgError::DowndateFailure { row: j });
            }
            let rad = arg.sqrt();
            let ch = rjj / rad;
            let sh = wj / rad;
            let row = &r[j * p + j + 1..(j + 1) * p];
            for (k, rjk) in row.iter().enumerate() {
                w[j + 1 + k] = ch * w[j + 1 + k] - sh * rjk;
            }
        }
        // Every pivot exists; apply the same rotations to R and u.
        for j in 0..p {
            let uj = u[j];
            if uj == 0.0 {
                continue;
            }
            let rjj = r[j * p + j];
            let rad = (rjj * rjj - uj * uj).sqrt();
            let ch = rjj / rad;
            let sh = uj / rad;
            r[j * p + j] = rad;
            let row = &mut r[j * p + j + 1..(j + 1) * p];
            for (k, rjk) in row.iter_mut().enumerate() {
                let t = *rjk;
                let uk = u[j + 1 + k];
                *rjk = ch * t - sh * uk;
                u[j + 1 + k] = ch * uk - sh * t;
            }
        }
        Ok(())
    }

    /// Forward solve `R' z = b`, overwriting `b` with `z`.
    pub fn solve_rt_inplace(&self, b: &mut [f64]) {
        let p = self.p;
        debug_assert_eq!(b.len(), p);
        let r = self.r.as_slice().expect("factor is contiguous");
        for k in 0..p {
            let xk = b[k] / r[k * p + k];
            b[k] = xk;
            let row = &r[k * p + k + 1..(k + 1) * p];
            for (i, rki) in row.iter().enumerate() {
                b[k + 1 + i] -= rki * xk;
            }
        }
    }

    /// Backward solve `R x = b`, overwriting `b` with `x`.
    pub fn solve_r_inplace(&self, b: &mut [f64]) {
        let p = self.p;
        debug_assert_eq!(b.len(), p);
        let r = self.r.as_slice().expect("factor is contiguous");
        for k in (0..p).rev() {
            let mut s = b[k];
            let row = &r[k * p + k + 1..(k + 1) * p];
            for (i, rki) in row.iter().enumerate() {
                s -= rki * b[k + 1 + i];
            }
            b[k] = s / r[k * p + k];
        }
    }

    /// Solves `R' R x = b`.
    pub fn solve(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let mut x = b.to_owned();
        self.solve_inplace(x.as_slice_mut().expect("contiguous"));
        x
    }

    pub fn solve_inplace(&self, b: &mut [f64]) {
        self.solve_rt_inplace(b);
        self.solve_r_inplace(b);
    }

    /// Reconstructs `R' R` (tests and diagnostics).
    pub fn reconstruct(&self) -> Array2<f64> {
        self.r.t().dot(&self.r)
    }
}

/// Solves `R' R x = b` for an upper-triangular factor.
pub fn tri_solve(factor: &CholeskyFactor, b: ArrayView1<f64>) -> Array1<f64> {
    factor.solve(b)
}

/// Factorizes a symmetric positive definite matrix.
pub fn cholesky(a: ArrayView2<f64>) -> Result<CholeskyFactor, LinalgError> {
    CholeskyFactor::new(a)
}

/// Pure rank-one update/downdate returning a fresh factor.
pub fn chol_rank1(
    factor: &CholeskyFactor,
    u: ArrayView1<f64>,
    up: bool,
) -> Result<CholeskyFactor, LinalgError> {
    factor.rank_one(u, up)
}

/// A Cholesky factor together with the downdate directions it refused.
///
/// The represented matrix is `R' R - U U'` where the columns of `U` are the
/// refused vectors. Solves go through the Woodbury identity at O(k p^2)
/// for `k` refused directions; with `k = 0` the solve path is exactly the
/// plain triangular solve.
#[derive(Debug, Clone)]
pub struct DowndateLedger {
    pub factor: CholeskyFactor,
    pub skipped: Vec<Array1<f64>>,
}

impl DowndateLedger {
    pub fn new(factor: CholeskyFactor) -> Self {
        DowndateLedger { factor, skipped: Vec::new() }
    }

    /// Number of refused downdate directions.
    pub fn deferred(&self) -> usize {
        self.skipped.len()
    }

    /// Applies a rank-one update/downdate, absorbing a refused downdate
    /// into the ledger instead of failing.
    pub fn rank_one(&mut self, u: &mut [f64], up: bool) {
        match self.factor.rank_one_inplace(u, up) {
            Ok(()) => {}
            Err(LinalgError::DowndateFailure { .. }) => {
                self.skipped.push(Array1::from(u.to_vec()));
            }
            Err(e) => unreachable!("rank_one dimension checked by caller: {e}"),
        }
    }

    /// Solves `(R' R - U U') x = b`.
    pub fn solve(&self, b: ArrayView1<f64>) -> Result<Array1<f64>, LinalgError> {
        let p = self.factor.dim();
        if b.len() != p {
            return Err(LinalgError::DimensionMismatch { expected: p, got: b.len() });
        }
        let mut w = b.to_vec();
        self.factor.solve_rt_inplace(&mut w);
        let k = self.skipped.len();
        if k > 0 {
            // W = R^{-T} U, M = W'W - I_k, w <- w - W M^{-1} W' w.
            let mut wu = Array2::<f64>::zeros((p, k));
            for (c, u) in self.skipped.iter().enumerate() {
                let mut col = u.to_vec();
                self.factor.solve_rt_inplace(&mut col);
                for i in 0..p {
                    wu[[i, c]] = col[i];
                }
            }
            let mut m = wu.t().dot(&wu);
            for i in 0..k {
                m[[i, i]] -= 1.0;
            }
            let t = {
                let wv = ArrayView1::from(&w[..]);
                wu.t().dot(&wv)
            };
            let s = solve_dense(m.view(), t.view()).ok_or(LinalgError::SingularCorrection)?;
            for i in 0..p {
                let mut acc = 0.0;
                for c in 0..k {
                    acc += wu[[i, c]] * s[c];
                }
                w[i] -= acc;
            }
        }
        self.factor.solve_r_inplace(&mut w);
        Ok(Array1::from(w))
    }
}

/// Solves the represented (possibly indefinite) fold Hessian system.
pub fn woodbury_solve(ledger: &DowndateLedger, b: ArrayView1<f64>) -> Result<Array1<f64>, LinalgError> {
    ledger.solve(b)
}

/// Dense LU solve with partial pivoting; `None` when a pivot underflows
/// the relative floor.
pub fn solve_dense(a: ArrayView2<f64>, b: ArrayView1<f64>) -> Option<Array1<f64>> {
    let n = a.nrows();
    if n != a.ncols() || b.len() != n {
        return None;
    }
    let mut m = nalgebra::DMatrix::<f64>::zeros(n, n);
    let mut scale = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = a[[i, j]];
            scale = scale.max(a[[i, j]].abs());
        }
    }
    let lu = m.lu();
    let umin = (0..n).fold(f64::INFINITY, |acc, i| acc.min(lu.u()[(i, i)].abs()));
    if !(umin > CORRECTION_PIVOT_EPS * scale.max(1e-300)) {
        return None;
    }
    let rhs = nalgebra::DVector::<f64>::from_iterator(n, b.iter().copied());
    let x = lu.solve(&rhs)?;
    if x.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(Array1::from_iter(x.iter().copied()))
}

/// Eigendecomposition of a symmetric matrix; eigenvalues ascending with
/// matching eigenvector columns.
pub fn sym_eigen(a: ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "sym_eigen needs a square matrix");
    let mut m = nalgebra::DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = 0.5 * (a[[i, j]] + a[[j, i]]);
        }
    }
    let se = nalgebra::SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| se.eigenvalues[i].total_cmp(&se.eigenvalues[j]));
    let mut vals = Array1::<f64>::zeros(n);
    let mut vecs = Array2::<f64>::zeros((n, n));
    for (c, &k) in order.iter().enumerate() {
        vals[c] = se.eigenvalues[k];
        for i in 0..n {
            vecs[[i, c]] = se.eigenvectors[(i, k)];
        }
    }
    (vals, vecs)
}
