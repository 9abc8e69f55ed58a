//! Small dense linear-algebra helpers shared by the filters, the backward
//! recursions and the oracle.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

/// Relative eigenvalue floor below which a symmetric matrix stops counting as PSD.
pub const PSD_REL_TOL: f64 = 1e-10;

/// Absolute asymmetry tolerated by the model validator.
pub const SYM_TOL: f64 = 1e-12;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return false;
            }
        }
    }
    true
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// PSD test with the relative tolerance `eig >= -1e-10 * max|eig|`.
pub fn is_psd(m: &DMatrix<f64>) -> bool {
    if m.nrows() == 0 {
        return true;
    }
    if m.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let ev = sym_eigenvalues(m);
    let scale = ev.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    ev[0] >= -PSD_REL_TOL * scale
}

pub fn is_pd(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite()) && Cholesky::new(symmetrize(m)).is_some()
}

pub fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(symmetrize(m))
}

pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    cholesky(m).map(|c| symmetrize(&c.inverse()))
}

/// A factor `L` with `L L^T = m` for a PSD matrix. Falls back to a
/// symmetric square root when Cholesky fails on a singular matrix.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(c) = cholesky(m) {
        return c.l();
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// `log N(x; mean, L L^T)` given the Cholesky factor of the covariance.
pub fn gaussian_log_density(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    chol: &Cholesky<f64, Dyn>,
) -> f64 {
    let d = x - mean;
    let l = chol.l_dirty();
    let y = l
        .solve_lower_triangular(&d)
        .expect("Cholesky factor has a nonzero diagonal");
    let log_det: f64 = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
    let n = x.len() as f64;
    -0.5 * (y.dot(&y) + log_det + n * (2.0 * std::f64::consts::PI).ln())
}

pub fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows(), "hstack row mismatch");
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    out
}

pub fn vstack_vec(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

pub fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut(a.shape(), b.shape()).copy_from(b);
    out
}

/// `||a - b|| / max(||a||, ||b||, floor)` in the Frobenius norm.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    let diff = (a - b).norm();
    diff / a.norm().max(b.norm()).max(floor)
}

pub fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>, floor: f64) -> f64 {
    let diff = (a - b).norm();
    diff / a.norm().max(b.norm()).max(floor)
}

/// Row-major nested arrays, the matrix layout used by every JSON schema here.
pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>], ncols: usize) -> Option<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    Some(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psd_tolerance_is_relative() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1e6, -1e-5]));
        assert!(is_psd(&m));
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-3]));
        assert!(!is_psd(&m));
    }

    #[test]
    fn psd_factor_handles_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = psd_factor(&m);
        assert!((&l * l.transpose() - &m).norm() < 1e-12);
    }

    #[test]
    fn log_density_matches_scalar_formula() {
        let cov = DMatrix::from_element(1, 1, 4.0);
        let c = cholesky(&cov).unwrap();
        let lp = gaussian_log_density(&DVector::from_element(1, 3.0), &DVector::from_element(1, 1.0), &c);
        let expect = -0.5 * (1.0 + (2.0 * std::f64::consts::PI * 4.0).ln());
        assert!((lp - expect).abs() < 1e-14);
    }
}
