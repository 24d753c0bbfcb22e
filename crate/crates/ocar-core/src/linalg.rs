//! Dense small-matrix kernels: SPD inversion via Cholesky, symmetric
//! eigendecomposition via cyclic Jacobi rotations, and Kronecker-structured
//! products.
//!
//! Everything is `f64` and row-major. These kernels back the per-layer
//! curvature blocks, which stay small (a few hundred rows at most), so no
//! attempt is made at blocking or SIMD.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    /// Cholesky hit a non-positive pivot; the caller owns the damping policy.
    #[error("matrix is not positive definite (pivot {pivot:.3e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("jacobi eigensolver did not converge after {sweeps} sweeps (off-diagonal {off:.3e})")]
    NoConvergence { sweeps: usize, off: f64 },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    /// Scaled identity `s·I`.
    pub fn scaled_identity(n: usize, s: f64) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = s;
        }
        m
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        debug_assert!(self.is_square());
        (0..self.rows).map(|i| self[(i, i)]).sum()
    }

    /// Add `s` to every diagonal entry, in place.
    pub fn add_diagonal(&mut self, s: f64) {
        debug_assert!(self.is_square());
        for i in 0..self.rows {
            self[(i, i)] += s;
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(i);
                for j in 0..other.cols {
                    out_row[j] += a * orow[j];
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// Max absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Dense vector of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    pub data: Vec<f64>,
}

impl Vector {
    pub fn zeros(n: usize) -> Self {
        Vector { data: vec![0.0; n] }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Vector { data: v.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

/// Cholesky factorization `M = L·Lᵀ` of a symmetric positive definite matrix.
///
/// Returns the lower triangle; fails on the first non-positive pivot without
/// regularizing (damping is the caller's decision).
pub fn cholesky(m: &Matrix) -> Result<Matrix, LinalgError> {
    if !m.is_square() {
        return Err(shape_err("square matrix", &format!("{}x{}", m.rows, m.cols)));
    }
    let n = m.rows;
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m[(i, j)];
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(LinalgError::NotPositiveDefinite { row: i, pivot: sum });
                }
                l[(i, j)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Ok(l)
}

/// Solve `M·X = B` for SPD `M` through its Cholesky factor.
pub fn spd_solve(m: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    let l = cholesky(m)?;
    let n = m.rows;
    if b.rows != n {
        return Err(shape_err(&format!("{} rows", n), &format!("{} rows", b.rows)));
    }
    let k = b.cols;
    // forward: L·Y = B
    let mut y = Matrix::zeros(n, k);
    for i in 0..n {
        for c in 0..k {
            let mut sum = b[(i, c)];
            for j in 0..i {
                sum -= l[(i, j)] * y[(j, c)];
            }
            y[(i, c)] = sum / l[(i, i)];
        }
    }
    // backward: Lᵀ·X = Y
    let mut x = Matrix::zeros(n, k);
    for i in (0..n).rev() {
        for c in 0..k {
            let mut sum = y[(i, c)];
            for j in (i + 1)..n {
                sum -= l[(j, i)] * x[(j, c)];
            }
            x[(i, c)] = sum / l[(i, i)];
        }
    }
    Ok(x)
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: &Matrix) -> Result<Matrix, LinalgError> {
    spd_solve(m, &Matrix::identity(m.rows))
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// the columns of `Q`, so `Q·diag(σ)·Qᵀ` reconstructs the input. Used for
/// spectrum diagnostics, not the training hot path.
pub fn sym_eig(m: &Matrix) -> Result<(Vector, Matrix), LinalgError> {
    if !m.is_square() {
        return Err(shape_err("square matrix", &format!("{}x{}", m.rows, m.cols)));
    }
    let n = m.rows;
    if n == 0 {
        return Ok((Vector::zeros(0), Matrix::zeros(0, 0)));
    }
    let mut a = m.clone();
    let mut q = Matrix::identity(n);
    let scale = m.max_abs().max(1.0);
    let tol = 1e-14 * scale;

    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < JACOBI_MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for r in (p + 1)..n {
                off = off.max(a[(p, r)].abs());
            }
        }
        if off <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for r in (p + 1)..n {
                let apq = a[(p, r)];
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(r, r)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // rotate rows/cols p and r of A
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, r)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, r)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(r, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(r, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let qkp = q[(k, p)];
                    let qkq = q[(k, r)];
                    q[(k, p)] = c * qkp - s * qkq;
                    q[(k, r)] = s * qkp + c * qkq;
                }
            }
        }
        sweeps += 1;
    }
    if !converged {
        let mut off = 0.0f64;
        for p in 0..n {
            for r in (p + 1)..n {
                off = off.max(a[(p, r)].abs());
            }
        }
        if off > tol {
            return Err(LinalgError::NoConvergence {
                sweeps: JACOBI_MAX_SWEEPS,
                off,
            });
        }
    }

    // sort descending, carrying eigenvector columns along
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap());
    let vals = Vector {
        data: order.iter().map(|&i| a[(i, i)]).collect(),
    };
    let mut vecs = Matrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            vecs[(k, new_col)] = q[(k, old_col)];
        }
    }
    Ok((vals, vecs))
}

/// Dense Kronecker product `a ⊗ b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows * b.rows, a.cols * b.cols);
    for ia in 0..a.rows {
        for ja in 0..a.cols {
            let s = a[(ia, ja)];
            if s == 0.0 {
                continue;
            }
            for ib in 0..b.rows {
                for jb in 0..b.cols {
                    out[(ia * b.rows + ib, ja * b.cols + jb)] = s * b[(ib, jb)];
                }
            }
        }
    }
    out
}

/// Column-major vectorization, the convention under which
/// `(A ⊗ G)·vec(V) = vec(G·V·Aᵀ)` holds.
pub fn vec_col_major(m: &Matrix) -> Vec<f64> {
    let mut v = Vec::with_capacity(m.rows * m.cols);
    for j in 0..m.cols {
        for i in 0..m.rows {
            v.push(m[(i, j)]);
        }
    }
    v
}

/// Inverse of [`vec_col_major`].
pub fn unvec_col_major(v: &[f64], rows: usize, cols: usize) -> Matrix {
    assert_eq!(v.len(), rows * cols);
    let mut m = Matrix::zeros(rows, cols);
    let mut idx = 0;
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = v[idx];
            idx += 1;
        }
    }
    m
}

/// Apply the Kronecker-factored inverse `(A ⊗ G)⁻¹` to a layer gradient.
///
/// `grad` is the `out_dim × (in_dim+1)` gradient matrix `V`; the result is
/// `G⁻¹·V·A⁻¹`, which equals reshaping `(A ⊗ G)⁻¹·vec(V)` under column-major
/// vectorization. Both factor inverses must be symmetric.
pub fn kron_precondition(
    a_inv: &Matrix,
    g_inv: &Matrix,
    grad: &Matrix,
) -> Result<Matrix, LinalgError> {
    if !a_inv.is_square() || !g_inv.is_square() {
        return Err(shape_err(
            "square factors",
            &format!("a {}x{}, g {}x{}", a_inv.rows, a_inv.cols, g_inv.rows, g_inv.cols),
        ));
    }
    if grad.rows != g_inv.rows || grad.cols != a_inv.rows {
        return Err(shape_err(
            &format!("grad {}x{}", g_inv.rows, a_inv.rows),
            &format!("grad {}x{}", grad.rows, grad.cols),
        ));
    }
    Ok(g_inv.matmul(grad).matmul(a_inv))
}

pub(crate) fn shape_err(expected: &str, got: &str) -> LinalgError {
    LinalgError::ShapeMismatch {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Test-side inversion oracle: Gauss-Jordan elimination with partial
    /// pivoting, independent of the Cholesky path.
    fn gauss_jordan_inverse(m: &Matrix) -> Matrix {
        let n = m.rows;
        let mut aug = Matrix::zeros(n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                aug[(i, j)] = m[(i, j)];
            }
            aug[(i, n + i)] = 1.0;
        }
        for col in 0..n {
            let mut piv = col;
            for r in col + 1..n {
                if aug[(r, col)].abs() > aug[(piv, col)].abs() {
                    piv = r;
                }
            }
            if piv != col {
                for j in 0..2 * n {
                    let tmp = aug[(col, j)];
                    aug[(col, j)] = aug[(piv, j)];
                    aug[(piv, j)] = tmp;
                }
            }
            let p = aug[(col, col)];
            assert!(p.abs() > 1e-300, "singular matrix in oracle");
            for j in 0..2 * n {
                aug[(col, j)] /= p;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = aug[(r, col)];
                if f == 0.0 {
                    continue;
                }
                for j in 0..2 * n {
                    aug[(r, j)] -= f * aug[(col, j)];
                }
            }
        }
        let mut inv = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                inv[(i, j)] = aug[(i, n + j)];
            }
        }
        inv
    }

    pub(crate) fn random_spd(n: usize, rng: &mut impl Rng) -> Matrix {
        let mut b = Matrix::zeros(n, n);
        for v in b.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut m = b.transpose().matmul(&b);
        m.add_diagonal(1.0);
        m
    }

    fn random_symmetric(n: usize, rng: &mut impl Rng) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = rng.gen_range(-2.0..2.0);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    #[test]
    fn spd_inverse_identity() {
        let inv = spd_inverse(&Matrix::identity(3)).unwrap();
        assert_eq!(inv, Matrix::identity(3));
    }

    #[test]
    fn spd_inverse_diagonal() {
        let mut d = Matrix::zeros(2, 2);
        d[(0, 0)] = 2.0;
        d[(1, 1)] = 4.0;
        let inv = spd_inverse(&d).unwrap();
        assert!((inv[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((inv[(1, 1)] - 0.25).abs() < 1e-15);
        assert_eq!(inv[(0, 1)], 0.0);
    }

    #[test]
    fn spd_inverse_matches_gauss_jordan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_spd(8, &mut rng);
        let inv = spd_inverse(&m).unwrap();
        let oracle = gauss_jordan_inverse(&m);
        assert!(inv.sub(&oracle).max_abs() <= 1e-10);
    }

    #[test]
    fn spd_inverse_residual_up_to_32() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [1usize, 2, 5, 16, 32] {
            let m = random_spd(n, &mut rng);
            let inv = spd_inverse(&m).unwrap();
            let resid = m.matmul(&inv).sub(&Matrix::identity(n)).max_abs();
            assert!(resid <= 1e-9, "n={n} resid={resid:.3e}");
        }
    }

    #[test]
    fn spd_inverse_rejects_indefinite() {
        let mut m = Matrix::identity(2);
        m[(1, 1)] = -1.0;
        match spd_inverse(&m) {
            Err(LinalgError::NotPositiveDefinite { .. }) => {}
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
    }

    #[test]
    fn sym_eig_diagonal() {
        let mut d = Matrix::zeros(2, 2);
        d[(0, 0)] = 3.0;
        d[(1, 1)] = 1.0;
        let (vals, vecs) = sym_eig(&d).unwrap();
        assert!((vals.data[0] - 3.0).abs() < 1e-12);
        assert!((vals.data[1] - 1.0).abs() < 1e-12);
        assert!((vecs[(0, 0)].abs() - 1.0).abs() < 1e-12);
        assert!((vecs[(1, 1)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sym_eig_two_by_two_hand_case() {
        // [[2,1],[1,2]]: characteristic polynomial (2-σ)² = 1 gives σ = 3, 1.
        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        let (vals, _) = sym_eig(&m).unwrap();
        assert!((vals.data[0] - 3.0).abs() < 1e-12);
        assert!((vals.data[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sym_eig_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_symmetric(6, &mut rng);
        let (vals, q) = sym_eig(&m).unwrap();
        let mut sigma = Matrix::zeros(6, 6);
        for i in 0..6 {
            sigma[(i, i)] = vals.data[i];
        }
        let rec = q.matmul(&sigma).matmul(&q.transpose());
        assert!(rec.sub(&m).max_abs() <= 1e-9);
        // columns orthonormal
        let qtq = q.transpose().matmul(&q);
        assert!(qtq.sub(&Matrix::identity(6)).max_abs() <= 1e-10);
    }

    #[test]
    fn sym_eig_spd_eigenvalues_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for n in [2usize, 4, 9] {
            let m = random_spd(n, &mut rng);
            let (vals, _) = sym_eig(&m).unwrap();
            assert!(vals.data.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn kron_precondition_identity_factors() {
        let v = Matrix::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.0, -1.0]]);
        let out = kron_precondition(&Matrix::identity(3), &Matrix::identity(2), &v).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn kron_precondition_scalar_factors() {
        let v = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 4.0]]);
        let a = Matrix::scaled_identity(2, 2.0);
        let g = Matrix::scaled_identity(2, 3.0);
        let out = kron_precondition(&a, &g, &v).unwrap();
        assert!(out.sub(&v.scale(6.0)).max_abs() < 1e-15);
    }

    #[test]
    fn kron_precondition_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let out_dim = rng.gen_range(1..=8);
            let in_p1 = rng.gen_range(1..=8);
            let a = random_spd(in_p1, &mut rng);
            let g = random_spd(out_dim, &mut rng);
            let a_inv = spd_inverse(&a).unwrap();
            let g_inv = spd_inverse(&g).unwrap();
            let mut v = Matrix::zeros(out_dim, in_p1);
            for x in v.data.iter_mut() {
                *x = rng.gen_range(-1.0..1.0);
            }
            let fast = kron_precondition(&a_inv, &g_inv, &v).unwrap();
            // dense route: (A ⊗ G)⁻¹ vec(V)
            let dense_inv = gauss_jordan_inverse(&kron(&a, &g));
            let vv = vec_col_major(&v);
            let dense = unvec_col_major(&dense_inv.matvec(&vv), out_dim, in_p1);
            assert!(fast.sub(&dense).max_abs() <= 1e-10);
        }
    }

    #[test]
    fn kron_precondition_shape_mismatch() {
        let v = Matrix::zeros(2, 3);
        let err = kron_precondition(&Matrix::identity(2), &Matrix::identity(2), &v);
        assert!(matches!(err, Err(LinalgError::ShapeMismatch { .. })));
    }

    #[test]
    fn kron_identity_relation() {
        // (A ⊗ G)·vec(V) = vec(G·V·Aᵀ)
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_symmetric(3, &mut rng);
        let g = random_symmetric(2, &mut rng);
        let mut v = Matrix::zeros(2, 3);
        for x in v.data.iter_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
        let lhs = kron(&a, &g).matvec(&vec_col_major(&v));
        let rhs = vec_col_major(&g.matmul(&v).matmul(&a.transpose()));
        for (l, r) in lhs.iter().zip(&rhs) {
            assert!((l - r).abs() < 1e-12);
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn inverse_residual_bounded(seed in 0u64..1000, n in 1usize..16) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = random_spd(n, &mut rng);
                let inv = spd_inverse(&m).unwrap();
                let resid = m.matmul(&inv).sub(&Matrix::identity(n)).max_abs();
                prop_assert!(resid <= 1e-9);
            }

            #[test]
            fn eig_reconstruction_bounded(seed in 0u64..1000, n in 1usize..10) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = random_symmetric(n, &mut rng);
                let (vals, q) = sym_eig(&m).unwrap();
                let mut sigma = Matrix::zeros(n, n);
                for i in 0..n { sigma[(i,i)] = vals.data[i]; }
                let rec = q.matmul(&sigma).matmul(&q.transpose());
                prop_assert!(rec.sub(&m).max_abs() <= 1e-9);
            }
        }
    }
}
