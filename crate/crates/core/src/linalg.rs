//! Dense row-major matrices and the small set of kernels the rest of the
//! crate needs: products, a one-sided Jacobi SVD, spectral norm, a
//! semi-definite Cholesky factorisation and stable softmax utilities.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Dense row-major `f64` matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::invalid("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Matrix::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
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

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Selects the given rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::invalid("shape mismatch in subtraction"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape_err("matmul", self, other));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(self, false, other, false, &mut out);
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(shape_err("matmul_t", self, other));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(self, false, other, true, &mut out);
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(shape_err("t_matmul", self, other));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(self, true, other, false, &mut out);
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::invalid(format!(
                "matvec: {}x{} times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// Largest absolute asymmetry `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows.min(self.cols) {
            for j in (i + 1)..self.cols.min(self.rows) {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }
}

fn shape_err(op: &str, a: &Matrix, b: &Matrix) -> Error {
    Error::invalid(format!(
        "{op}: incompatible shapes {}x{} and {}x{}",
        a.rows, a.cols, b.rows, b.cols
    ))
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// `out = op(a) · op(b)` through matrixmultiply's dgemm; transposes are
/// expressed as strides so nothing is copied.
fn gemm(a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool, out: &mut Matrix) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if trans_b { b.rows } else { b.cols };
    debug_assert_eq!(out.shape(), (m, n));
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.data.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    // SAFETY: strides and extents describe exactly the buffers of `a`, `b`
    // and `out`, which are valid for the duration of the call and do not
    // alias (`out` is borrowed mutably).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.data.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Thin singular value decomposition `A = U · diag(sigma) · Vᵀ`.
///
/// For an `m x n` input with `k = min(m, n)`, `u` is `m x k`, `v` is `n x k`
/// and `sigma` holds `k` non-negative values in descending order.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.sigma.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.matmul_t(&self.v).expect("svd factors have consistent shapes")
    }
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// One-sided (Hestenes) Jacobi SVD.
pub fn thin_svd(a: &Matrix) -> Result<Svd> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::invalid("svd of an empty matrix"));
    }
    if !a.is_finite() {
        return Err(Error::invalid("svd input contains non-finite values"));
    }
    if a.rows() < a.cols() {
        let t = thin_svd(&a.transpose())?;
        return Ok(Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        });
    }
    let m = a.rows();
    let n = a.cols();

    // Column-major working copies: rotations act on whole columns.
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let tol = f64::EPSILON;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut w, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = w.iter().map(|c| norm2(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let sigma_max = norms[order[0]];
    let zero_tol = sigma_max * f64::EPSILON * m.max(n) as f64;
    let mut sigma = Vec::with_capacity(n);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let s = norms[j];
        if s > zero_tol && s > 0.0 {
            sigma.push(s);
            u_cols.push(w[j].iter().map(|x| x / s).collect());
        } else {
            sigma.push(0.0);
            u_cols.push(Vec::new());
            pending.push(slot);
        }
    }
    for slot in pending {
        let filled: Vec<&Vec<f64>> = u_cols.iter().filter(|c| !c.is_empty()).collect();
        let col = orthonormal_complement(m, &filled);
        u_cols[slot] = col;
    }

    let u = Matrix::from_fn(m, n, |i, k| u_cols[k][i]);
    let vm = Matrix::from_fn(n, n, |i, k| v[order[k]][i]);
    Ok(Svd { u, sigma, v: vm })
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// A unit vector orthogonal to every column in `basis` (Gram–Schmidt over
/// the standard basis, picking the candidate with the largest residual).
fn orthonormal_complement(m: usize, basis: &[&Vec<f64>]) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for e in 0..m {
        let mut cand = vec![0.0; m];
        cand[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let proj = dot(&cand, b);
                cand.iter_mut().zip(b.iter()).for_each(|(c, bi)| *c -= proj * bi);
            }
        }
        let nrm = norm2(&cand);
        if best.as_ref().is_none_or(|(bn, _)| nrm > *bn) {
            best = Some((nrm, cand));
        }
    }
    let (nrm, mut cand) = best.expect("m >= 1");
    cand.iter_mut().for_each(|c| *c /= nrm);
    cand
}

/// Largest singular value.
pub fn spectral_norm(a: &Matrix) -> Result<f64> {
    if !a.is_finite() {
        return Err(Error::invalid("spectral norm of a non-finite matrix"));
    }
    Ok(thin_svd(a)?.sigma[0])
}

/// Lower-triangular `L` with `A = L Lᵀ` for a symmetric positive
/// semi-definite `A`.
///
/// Pivots within `1e-12 * max diag` of zero are treated as exact zeros
/// (the corresponding column of `L` is zeroed), so rank-deficient inputs
/// factor cleanly. A clearly negative pivot is a numerical error.
pub fn cholesky_psd(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::invalid("cholesky of a non-square matrix"));
    }
    if !a.is_finite() {
        return Err(Error::invalid("cholesky input contains non-finite values"));
    }
    let n = a.rows();
    let scale = (0..n).fold(0.0f64, |m, i| m.max(a[(i, i)].abs()));
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -tol {
            return Err(Error::numerical(format!(
                "matrix is not positive semi-definite (pivot {d:e} at {j})"
            )));
        }
        if d <= tol {
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// `log Σ exp(v_k)` with a max shift.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::invalid("log-sum-exp of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("log-sum-exp of a non-finite vector"));
    }
    Ok(lse_unchecked(v))
}

#[inline]
pub(crate) fn lse_unchecked(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("softmax of a non-finite vector"));
    }
    Ok(softmax_unchecked(v))
}

#[inline]
pub(crate) fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= s);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn check_svd(a: &Matrix) {
        let svd = thin_svd(a).unwrap();
        let scale = a.max_abs().max(1e-300);
        let rec = svd.reconstruct();
        let err = rec.sub(a).unwrap().max_abs();
        assert!(err <= 1e-10 * scale.max(1.0), "reconstruction error {err}");
        for w in svd.sigma.windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert!(svd.sigma.iter().all(|s| *s >= 0.0));
        let k = svd.sigma.len();
        let utu = svd.u.t_matmul(&svd.u).unwrap();
        let vtv = svd.v.t_matmul(&svd.v).unwrap();
        assert!(utu.sub(&Matrix::identity(k)).unwrap().max_abs() < 1e-10);
        assert!(vtv.sub(&Matrix::identity(k)).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn svd_identity() {
        let svd = thin_svd(&Matrix::identity(3)).unwrap();
        assert_eq!(svd.sigma, vec![1.0, 1.0, 1.0]);
        assert_eq!(svd.u, Matrix::identity(3));
        assert_eq!(svd.v, Matrix::identity(3));
    }

    #[test]
    fn svd_diagonal() {
        let svd = thin_svd(&Matrix::diag(&[5.0, 2.0])).unwrap();
        assert_eq!(svd.sigma, vec![5.0, 2.0]);
        let svd = thin_svd(&Matrix::diag(&[2.0, 5.0])).unwrap();
        assert_eq!(svd.sigma, vec![5.0, 2.0]);
    }

    #[test]
    fn svd_random_4x3() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(4, 3, &mut rng);
        let svd = thin_svd(&a).unwrap();
        assert!(svd.reconstruct().sub(&a).unwrap().frobenius_norm() < 1e-10);
        check_svd(&a);
    }

    #[test]
    fn svd_wide_and_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(3, 7, &mut rng);
        check_svd(&a);
        // rank 2 in R^{6x5}
        let b = random(6, 2, &mut rng).matmul(&random(2, 5, &mut rng)).unwrap();
        check_svd(&b);
        let svd = thin_svd(&b).unwrap();
        assert!(svd.sigma[2] < 1e-12 * svd.sigma[0]);
        check_svd(&Matrix::zeros(3, 2));
    }

    #[test]
    fn svd_many_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let r = rng.random_range(1..=64);
            let c = rng.random_range(1..=(if r > 24 { 8 } else { 64 }));
            check_svd(&random(r, c, &mut rng));
        }
    }

    #[test]
    fn svd_rejects_nan() {
        let mut a = Matrix::identity(2);
        a[(0, 1)] = f64::NAN;
        assert!(matches!(thin_svd(&a), Err(Error::InvalidInput(_))));
        assert!(matches!(spectral_norm(&a), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn spectral_norm_simple_cases() {
        assert!((spectral_norm(&Matrix::identity(5)).unwrap() - 1.0).abs() < 1e-15);
        assert!((spectral_norm(&Matrix::diag(&[3.0, 1.0])).unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn spectral_norm_symmetric_matches_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let b = random(5, 5, &mut rng);
            let s = b.transpose().sub(&b.scale_ret(-1.0)).unwrap(); // b + bᵀ
            let na = nalgebra::DMatrix::from_row_slice(5, 5, s.as_slice());
            let eig = na.symmetric_eigen();
            let oracle = eig.eigenvalues.iter().fold(0.0f64, |m, e| m.max(e.abs()));
            let got = spectral_norm(&s).unwrap();
            assert!((got - oracle).abs() <= 1e-8 * oracle);
        }
    }

    #[test]
    fn spectral_norm_transpose_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let a = random(rng.random_range(1..10), rng.random_range(1..10), &mut rng);
            let d = spectral_norm(&a).unwrap() - spectral_norm(&a.transpose()).unwrap();
            assert!(d.abs() < 1e-10);
        }
    }

    #[test]
    fn cholesky_full_and_singular() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let b = random(4, 4, &mut rng);
        let a = b.matmul_t(&b).unwrap();
        let l = cholesky_psd(&a).unwrap();
        assert!(l.matmul_t(&l).unwrap().sub(&a).unwrap().max_abs() < 1e-12);
        let low = random(4, 2, &mut rng);
        let s = low.matmul_t(&low).unwrap();
        let l = cholesky_psd(&s).unwrap();
        assert!(l.matmul_t(&l).unwrap().sub(&s).unwrap().max_abs() < 1e-10);
        assert!(cholesky_psd(&Matrix::zeros(3, 3)).unwrap().max_abs() == 0.0);
        assert!(matches!(
            cholesky_psd(&Matrix::diag(&[1.0, -1.0])),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn lse_cases() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0, 1000.0]).unwrap() - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!(log_sum_exp(&[1e6, -1e6]).unwrap().is_finite());
        assert!(matches!(log_sum_exp(&[]), Err(Error::InvalidInput(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
        let naive = v.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&v).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&[0.0, 0.0, 0.0]).unwrap();
        s.iter().for_each(|p| assert!((p - 1.0 / 3.0).abs() < 1e-15));
        let s = softmax(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn products_agree_with_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(7, 5, &mut rng);
        let b = random(5, 3, &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let s: f64 = (0..5).map(|k| a[(i, k)] * b[(k, j)]).sum();
                assert!((c[(i, j)] - s).abs() < 1e-14);
            }
        }
        let bt = b.transpose();
        assert!(a.matmul_t(&bt).unwrap().sub(&c).unwrap().max_abs() < 1e-14);
        let at = a.transpose();
        assert!(at.t_matmul(&b).unwrap().sub(&c).unwrap().max_abs() < 1e-14);
        assert!(a.matmul(&a).is_err());
    }

    impl Matrix {
        fn scale_ret(&self, s: f64) -> Matrix {
            let mut m = self.clone();
            m.scale(s);
            m
        }
    }

    proptest::proptest! {
        #[test]
        fn softmax_shift_invariant(
            v in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -1e3f64..1e3,
        ) {
            let a = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                proptest::prop_assert!((x - y).abs() < 1e-12);
            }
            proptest::prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
