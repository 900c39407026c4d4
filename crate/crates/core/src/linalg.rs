//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Result, TcaError};

/// Applies `f` to the eigenvalues of a symmetric matrix.
pub fn sym_matrix_fn(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let mapped = eig.eigenvalues.map(f);
    let v = &eig.eigenvectors;
    v * DMatrix::from_diagonal(&mapped) * v.transpose()
}

/// Symmetric positive-definite square root.
pub fn spd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_spd(a)?;
    Ok(sym_matrix_fn(a, f64::sqrt))
}

/// Log-determinant through a Cholesky factorization.
pub fn spd_log_det(a: &DMatrix<f64>) -> Result<f64> {
    let chol = a.clone().cholesky().ok_or(TcaError::NotSpd)?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Log-determinant of a symmetric matrix that should be positive definite;
/// falls back to an eigendecomposition with eigenvalues floored at `floor`
/// when Cholesky fails.
pub fn floored_log_det(a: &DMatrix<f64>, floor: f64) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    match a.clone().cholesky() {
        Some(chol) => 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
        None => SymmetricEigen::new(a.clone())
            .eigenvalues
            .iter()
            .map(|&l| l.max(floor).ln())
            .sum(),
    }
}

pub fn check_spd(a: &DMatrix<f64>) -> Result<()> {
    if !a.is_square() || !is_symmetric(a, 1e-10) {
        return Err(TcaError::NotSpd);
    }
    if a.clone().cholesky().is_none() {
        return Err(TcaError::NotSpd);
    }
    Ok(())
}

pub fn is_symmetric(a: &DMatrix<f64>, rel_tol: f64) -> bool {
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > rel_tol * scale {
                return false;
            }
        }
    }
    true
}

/// Ratio of largest to smallest singular value.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Nearest orthogonal matrix in Frobenius norm (polar factor).
pub fn nearest_orthogonal(a: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    u * vt
}
