//! Dense linear-algebra helpers shared across the crate.

use nalgebra::{DMatrix, DVector};

/// Numerical rank via singular values, thresholded at `max(dim) * eps * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let svd = m.clone().svd(false, false);
    let sigma_max = svd.singular_values.max();
    if !(sigma_max > 0.0) {
        return 0;
    }
    let tol = m.nrows().max(m.ncols()) as f64 * f64::EPSILON * sigma_max;
    svd.singular_values.iter().filter(|&&s| s > tol).count()
}

/// Matrix power by repeated multiplication; exponents stay small here.
pub fn mat_pow(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "mat_pow needs a square matrix");
    let mut out = DMatrix::identity(n, n);
    for _ in 0..k {
        out = &out * m;
    }
    out
}

/// Left pseudo-inverse `(M^T M)^{-1} M^T` of a full-column-rank matrix.
pub fn left_pseudo_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let gram = m.transpose() * m;
    gram.try_inverse().map(|g| g * m.transpose())
}

/// Stack blocks vertically. All blocks must share a column count.
pub fn vstack(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    assert!(!blocks.is_empty(), "vstack needs at least one block");
    let ncols = blocks[0].ncols();
    let nrows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(nrows, ncols);
    let mut row = 0;
    for b in blocks {
        assert_eq!(b.ncols(), ncols, "vstack blocks must share a column count");
        out.rows_mut(row, b.nrows()).copy_from(b);
        row += b.nrows();
    }
    out
}

/// Orthonormal basis of the numerical nullspace, from right singular vectors.
///
/// Only correct for matrices with at least as many rows as columns, which is
/// all this crate ever feeds it (stacked observability matrices).
pub fn nullspace(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    debug_assert!(m.nrows() >= m.ncols());
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let sigma_max = svd.singular_values.max();
    let tol = m.nrows().max(m.ncols()) as f64 * f64::EPSILON * sigma_max.max(f64::MIN_POSITIVE);
    let mut basis = Vec::new();
    for (idx, &s) in svd.singular_values.iter().enumerate() {
        if s <= tol {
            basis.push(v_t.row(idx).transpose());
        }
    }
    basis
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Pick out the listed coordinates of a vector, in the order given.
pub fn select_coords(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |r, _| v[idx[r]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_of_rank_deficient_matrix() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 1.0, 0.0, 1.0, 0.0, 2.0, 5.0, 2.0]);
        assert_eq!(numerical_rank(&m), 2);
        assert_eq!(numerical_rank(&DMatrix::<f64>::zeros(2, 2)), 0);
        assert_eq!(numerical_rank(&DMatrix::<f64>::identity(4, 4)), 4);
    }

    #[test]
    fn mat_pow_matches_repeated_multiplication() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let a3 = &a * &(&a * &a);
        assert_eq!(mat_pow(&a, 3), a3);
        assert_eq!(mat_pow(&a, 0), DMatrix::identity(2, 2));
    }

    #[test]
    fn left_pseudo_inverse_is_left_inverse() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 0.0, 2.0]);
        let pinv = left_pseudo_inverse(&m).unwrap();
        let id = pinv * &m;
        assert!((id - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn nullspace_of_singular_stack() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let basis = nullspace(&m);
        assert_eq!(basis.len(), 1);
        assert!((basis[0].norm() - 1.0).abs() < 1e-12);
        assert!((&m * &basis[0]).amax() < 1e-12);
    }

    #[test]
    fn spectral_radius_of_rotation() {
        let th = 0.3_f64;
        let a = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]) * 0.99;
        assert!((spectral_radius(&a) - 0.99).abs() < 1e-10);
    }
}
