//! Dense linear algebra and special functions shared by every other module.
//!
//! Everything here is plain `f64` with value semantics; the hot paths used by
//! the network code (`matmul_nt` and friends) iterate over contiguous rows so
//! the compiler can vectorize them.

use crate::error::{Error, Result};

/// Row-major dense matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape does not match data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn diag(d: &[f64]) -> Self {
        let n = d.len();
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = d[i];
        }
        m
    }

    /// Outer product `a bᵀ`.
    pub fn outer(a: &[f64], b: &[f64]) -> Self {
        let mut m = Self::zeros(a.len(), b.len());
        for (i, &ai) in a.iter().enumerate() {
            let row = m.row_mut(i);
            for (j, &bj) in b.iter().enumerate() {
                row[j] = ai * bj;
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
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

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add_scaled_assign(&mut self, other: &Matrix, s: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * s;
        }
    }

    /// `C = A B` (plain product).
    pub fn matmul_nn(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "inner dimensions differ");
        let mut c = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let c_row = &mut c.data[i * other.cols..(i + 1) * other.cols];
            for (l, &a_il) in a_row.iter().enumerate() {
                if a_il == 0.0 {
                    continue;
                }
                let b_row = other.row(l);
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += a_il * bv;
                }
            }
        }
        c
    }

    /// `C = A Bᵀ`; both operands are walked row-by-row so every dot product
    /// runs over contiguous memory.
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "inner dimensions differ");
        let mut c = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let c_row = &mut c.data[i * other.rows..(i + 1) * other.rows];
            for (j, cv) in c_row.iter_mut().enumerate() {
                *cv = dot(a_row, other.row(j));
            }
        }
        c
    }

    /// `C = Aᵀ B`.
    pub fn matmul_tn(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "inner dimensions differ");
        let mut c = Matrix::zeros(self.cols, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let b_row = other.row(i);
            for (j, &a_ij) in a_row.iter().enumerate() {
                if a_ij == 0.0 {
                    continue;
                }
                let c_row = &mut c.data[j * other.cols..(j + 1) * other.cols];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += a_ij * bv;
                }
            }
        }
        c
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len());
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let scale = 1.0 + self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if (self.get(i, j) - self.get(j, i)).abs() > tol * scale {
                    return false;
                }
            }
        }
        true
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Maximum absolute column sum.
    pub fn norm_one(&self) -> f64 {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self.get(i, j).abs()).sum())
            .fold(0.0f64, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Quadratic form `xᵀ M x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        dot(&self.matvec(x), x)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Numerically stable `log Σ exp(x_i)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Lower-triangular Cholesky factor of an SPD matrix with its cached
/// log-determinant (`log det M = 2 Σ log L_ii`).
#[derive(Debug, Clone)]
pub struct SpdFactor {
    l: Matrix,
    log_det: f64,
}

impl SpdFactor {
    pub fn lower(&self) -> &Matrix {
        &self.l
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// Rebuild `L Lᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        self.l.matmul_nt(&self.l)
    }

    /// Solve `L Lᵀ x = b`.
    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut y = b.to_vec();
        // forward: L y = b
        for i in 0..n {
            let row = self.l.row(i);
            let s = dot(&row[..i], &y[..i]);
            y[i] = (y[i] - s) / row[i];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in (i + 1)..n {
                s -= self.l.get(j, i) * y[j];
            }
            y[i] = s / self.l.get(i, i);
        }
        y
    }

    /// Dense inverse of the factored matrix.
    pub fn inverse(&self) -> Matrix {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.solve_vec(&e);
            for i in 0..n {
                inv.set(i, j, col[i]);
            }
            e[j] = 0.0;
        }
        // symmetrize to kill round-off asymmetry
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (inv.get(i, j) + inv.get(j, i));
                inv.set(i, j, v);
                inv.set(j, i, v);
            }
        }
        inv
    }
}

/// Cholesky factorization of a symmetric positive-definite matrix.
pub fn cholesky(m: &Matrix) -> Result<SpdFactor> {
    if m.rows() != m.cols() {
        return Err(Error::ShapeMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_symmetric(1e-9) {
        return Err(Error::Domain("cholesky input is not symmetric".into()));
    }
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::NotPositiveDefinite { index: i, pivot: s });
                }
                l.set(i, j, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    let log_det = 2.0 * (0..n).map(|i| l.get(i, i).ln()).sum::<f64>();
    Ok(SpdFactor { l, log_det })
}

/// Cholesky with the bounded jitter policy: on failure add `eps I` with
/// `eps` stepping 1e-10, 1e-9, ..., 1e-6, then hard-fail.
pub fn cholesky_jittered(m: &Matrix) -> Result<SpdFactor> {
    match cholesky(m) {
        Ok(f) => return Ok(f),
        Err(Error::NotPositiveDefinite { .. }) => {}
        Err(e) => return Err(e),
    }
    let mut eps = 1e-10;
    while eps <= 1e-6 {
        let mut jittered = m.clone();
        for i in 0..m.rows() {
            let v = jittered.get(i, i) + eps;
            jittered.set(i, i, v);
        }
        match cholesky(&jittered) {
            Ok(f) => return Ok(f),
            Err(Error::NotPositiveDefinite { .. }) => eps *= 10.0,
            Err(e) => return Err(e),
        }
    }
    cholesky(m)
}

/// Digamma function ψ(x) for x > 0.
///
/// Shifts the argument above 10 with the recurrence ψ(x) = ψ(x+1) − 1/x and
/// finishes with the asymptotic series; absolute error below 1e-12 on
/// [1e-3, 1e6].
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("digamma requires x > 0, got {x}")));
    }
    let mut acc = 0.0;
    let mut x = x;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // ln x − 1/(2x) − Σ B_{2n}/(2n x^{2n})
    let series = inv2
        * (-1.0 / 12.0
            + inv2
                * (1.0 / 120.0
                    + inv2
                        * (-1.0 / 252.0
                            + inv2
                                * (1.0 / 240.0
                                    + inv2
                                        * (-1.0 / 132.0
                                            + inv2 * (691.0 / 32760.0 + inv2 * (-1.0 / 12.0)))))));
    Ok(acc + x.ln() - 0.5 * inv + series)
}

/// Natural log of the gamma function for x > 0.
///
/// Same shift-then-Stirling scheme as [`digamma`].
pub fn log_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("log_gamma requires x > 0, got {x}")));
    }
    let mut acc = 0.0;
    let mut x = x;
    while x < 10.0 {
        acc -= x.ln();
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        * (1.0 / 12.0
            + inv2
                * (-1.0 / 360.0
                    + inv2
                        * (1.0 / 1260.0
                            + inv2
                                * (-1.0 / 1680.0
                                    + inv2
                                        * (1.0 / 1188.0
                                            + inv2
                                                * (-691.0 / 360360.0
                                                    + inv2 * (1.0 / 156.0)))))));
    let half_log_two_pi = 0.918_938_533_204_672_7;
    Ok(acc + (x - 0.5) * x.ln() - x + half_log_two_pi + series)
}

/// Multivariate log-gamma `ln Γ_D(a)`.
pub fn log_multi_gamma(dim: usize, a: f64) -> Result<f64> {
    let d = dim as f64;
    let mut s = d * (d - 1.0) / 4.0 * std::f64::consts::PI.ln();
    for i in 0..dim {
        s += log_gamma(a - 0.5 * i as f64)?;
    }
    Ok(s)
}

/// Sum of digammas `Σ_{i=1..D} ψ((a + 1 − i)/2)` used by the Wishart
/// expected log-determinant.
pub fn digamma_half_sum(dim: usize, a: f64) -> Result<f64> {
    let mut s = 0.0;
    for i in 1..=dim {
        s += digamma(0.5 * (a + 1.0 - i as f64))?;
    }
    Ok(s)
}

const POWER_ITER_MAX: usize = 1000;
const POWER_ITER_TOL: f64 = 1e-12;

/// Dominant eigenvector of a symmetric matrix via shifted power iteration.
///
/// The Gershgorin shift makes the largest algebraic eigenvalue also the
/// largest in magnitude. Sign convention: first entry above 1e-12 in
/// magnitude is positive.
pub fn principal_eigvec(s: &Matrix) -> Result<Vec<f64>> {
    if s.rows() != s.cols() {
        return Err(Error::ShapeMismatch("principal_eigvec needs a square matrix".into()));
    }
    if !s.is_symmetric(1e-9) {
        return Err(Error::Domain("principal_eigvec input is not symmetric".into()));
    }
    let n = s.rows();
    let shift = (0..n)
        .map(|i| s.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    // deterministic non-degenerate start
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 / (1.0 + i as f64)).collect();
    normalize(&mut v);
    for iter in 0..POWER_ITER_MAX {
        let mut w = s.matvec(&v);
        axpy(&mut w, shift, &v);
        let norm = dot(&w, &w).sqrt();
        if norm < 1e-300 || !norm.is_finite() {
            return Err(Error::NoConvergence(iter));
        }
        for x in &mut w {
            *x /= norm;
        }
        // align sign before measuring the change
        if dot(&w, &v) < 0.0 {
            for x in &mut w {
                *x = -*x;
            }
        }
        let delta = w.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        v = w;
        if delta < POWER_ITER_TOL {
            fix_sign(&mut v);
            return Ok(v);
        }
    }
    Err(Error::NoConvergence(POWER_ITER_MAX))
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

fn fix_sign(v: &mut [f64]) {
    // entries below 1e-6 are treated as zero so numerical dust cannot
    // hijack the convention (the vector is unit norm, so a real leading
    // component is far larger)
    if let Some(&first) = v.iter().find(|x| x.abs() > 1e-6) {
        if first < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
/// eigenvalues in ascending order with matching eigenvector columns.
pub(crate) fn sym_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if m.rows() != m.cols() {
        return Err(Error::ShapeMismatch("sym_eigen needs a square matrix".into()));
    }
    let n = m.rows();
    let mut a = m.clone();
    let mut v = Matrix::identity(n);
    let fro = a.frobenius_norm().max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a.get(i, j).powi(2);
            }
        }
        if off.sqrt() <= 1e-14 * fro {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut pairs: Vec<(f64, usize)> = (0..n).map(|i| (a.get(i, i), i)).collect();
    pairs.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    let eigvals: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut vecs = Matrix::zeros(n, n);
    for (new_j, &(_, old_j)) in pairs.iter().enumerate() {
        for i in 0..n {
            vecs.set(i, new_j, v.get(i, old_j));
        }
    }
    Ok((eigvals, vecs))
}

/// Matrix exponential by scaling-and-squaring with a Taylor core.
pub(crate) fn expm(a: &Matrix) -> Matrix {
    assert_eq!(a.rows(), a.cols());
    let n = a.rows();
    let norm = a.norm_one();
    let s = if norm > 0.25 { (norm / 0.25).log2().ceil() as u32 } else { 0 };
    let b = a.scale(0.5f64.powi(s as i32));
    let mut result = Matrix::identity(n);
    let mut term = Matrix::identity(n);
    for k in 1..=30 {
        term = term.matmul_nn(&b).scale(1.0 / k as f64);
        result.add_assign(&term);
        if term.norm_one() < 1e-18 * result.norm_one() {
            break;
        }
    }
    for _ in 0..s {
        result = result.matmul_nn(&result);
    }
    result
}
