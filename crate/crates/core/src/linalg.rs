//! Small symmetric-matrix helpers built on nalgebra eigendecompositions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Moore–Penrose pseudo-inverse of a symmetric PSD matrix. Eigenvalues below
/// `rel_cutoff` times the largest are treated as zero; the flag reports
/// whether any were dropped (rank deficiency).
pub fn sym_pinv(m: &DMatrix<f64>, rel_cutoff: f64) -> (DMatrix<f64>, bool) {
    let eig = m.clone().symmetric_eigen();
    let max_ev = eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, &v| acc.max(v.abs()));
    let mut dropped = false;
    let inv_evs: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&v| {
            if max_ev == 0.0 || v <= rel_cutoff * max_ev {
                dropped = true;
                0.0
            } else {
                1.0 / v
            }
        })
        .collect();
    let d = DMatrix::from_diagonal(&DVector::from_vec(inv_evs));
    let pinv = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    (symmetrize(&pinv), dropped)
}

/// Inverse symmetric square root M^{−1/2} of a positive definite matrix.
/// Fails if any eigenvalue is at or below `floor` instead of regularizing.
pub fn sym_inv_sqrt(m: &DMatrix<f64>, floor: f64, what: &str) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let mut inv_sqrt = Vec::with_capacity(eig.eigenvalues.len());
    for &v in eig.eigenvalues.iter() {
        if v <= floor {
            return Err(Error::SingularMatrix(format!(
                "{what}: eigenvalue {v} at or below floor {floor}"
            )));
        }
        inv_sqrt.push(1.0 / v.sqrt());
    }
    let d = DMatrix::from_diagonal(&DVector::from_vec(inv_sqrt));
    Ok(symmetrize(&(&eig.eigenvectors * d * eig.eigenvectors.transpose())))
}

/// Symmetric square root M^{1/2} of a PSD matrix (negative ripple clamped).
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let roots: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()).collect();
    let d = DMatrix::from_diagonal(&DVector::from_vec(roots));
    symmetrize(&(&eig.eigenvectors * d * eig.eigenvectors.transpose()))
}

/// vᵀ M v.
pub fn quad_form(v: &DVector<f64>, m: &DMatrix<f64>) -> f64 {
    (m * v).dot(v)
}

/// Smallest eigenvalue (symmetric input).
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |acc, &v| acc.min(v))
}

/// Forces exact symmetry after a product of symmetric factors.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Row-major nested representation for JSON reports.
pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}
