//! Small dense-matrix helpers shared across the crate.
//!
//! Everything here operates on `nalgebra` dynamic matrices at desk scale
//! (state dimensions in the single digits), so clarity wins over cleverness.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Returns the largest absolute asymmetry `max |m - m'|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Replaces `m` by its symmetric part `(m + m') / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let eig = m.clone().symmetric_eigen();
    eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b))
}

/// Validates that `m` is square of size `dim`, symmetric within `sym_tol`,
/// and positive semidefinite with eigenvalues no worse than `-psd_tol`.
pub fn check_symmetric_psd(
    m: &DMatrix<f64>,
    dim: usize,
    sym_tol: f64,
    psd_tol: f64,
    what: &str,
) -> Result<()> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(Error::dim(
            what,
            format!("{dim}x{dim}"),
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    let asym = asymmetry(m);
    if asym > sym_tol {
        return Err(Error::matrix(
            what,
            format!("asymmetry {asym:.3e} exceeds tolerance {sym_tol:.1e}"),
        ));
    }
    let min_eig = min_eigenvalue(&symmetrize(m));
    if min_eig < -psd_tol {
        return Err(Error::matrix(
            what,
            format!("not PSD: min eigenvalue {min_eig:.3e} below -{psd_tol:.1e}"),
        ));
    }
    Ok(())
}

/// Clips tiny negative eigenvalues of a symmetric matrix to zero.
///
/// Eigenvalues below `-fail_tol` are a hard error; values in
/// `[-fail_tol, 0)` are numerical noise and are clamped.
pub fn clip_psd(m: &DMatrix<f64>, fail_tol: f64, what: &str) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    let sym = symmetrize(m);
    let eig = sym.clone().symmetric_eigen();
    let min_eig = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if min_eig >= 0.0 {
        return Ok(sym);
    }
    if min_eig < -fail_tol {
        return Err(Error::matrix(
            what,
            format!("not PSD: min eigenvalue {min_eig:.3e} below -{fail_tol:.1e}"),
        ));
    }
    let mut vals = eig.eigenvalues;
    for v in vals.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let basis = eig.eigenvectors;
    Ok(symmetrize(
        &(&basis * DMatrix::from_diagonal(&vals) * basis.transpose()),
    ))
}

/// Solves `a x = b` for symmetric positive-definite `a` via Cholesky,
/// falling back to an eigenvalue pseudo-inverse with relative tolerance.
pub fn solve_spd(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if let Some(chol) = a.clone().cholesky() {
        return Ok(chol.solve(b));
    }
    Ok(pseudo_inverse_sym(a, what)? * b)
}

/// Pseudo-inverse of a symmetric PSD matrix via eigendecomposition.
///
/// Eigenvalues below `1e-12 * max(1, lambda_max)` are treated as zero;
/// meaningfully negative eigenvalues are an error.
pub fn pseudo_inverse_sym(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = symmetrize(a);
    let eig = sym.symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let tol = 1e-12 * max_eig.max(1.0);
    let mut inv_vals = eig.eigenvalues.clone();
    for v in inv_vals.iter_mut() {
        if *v < -tol * 1e3 {
            return Err(Error::NumericalFailure(format!(
                "{what}: matrix is indefinite (eigenvalue {v:.3e})"
            )));
        }
        *v = if v.abs() <= tol { 0.0 } else { 1.0 / *v };
    }
    let basis = eig.eigenvectors;
    Ok(&basis * DMatrix::from_diagonal(&inv_vals) * basis.transpose())
}

/// Minimum-norm least-squares solve `b u = rhs` via SVD.
///
/// Returns the solution together with the residual norm `|b u - rhs|`.
pub fn lstsq_min_norm(b: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let svd = b.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().fold(0.0f64, |m, &v| m.max(v));
    let tol = 1e-12 * max_sv.max(1.0);
    let sol = svd
        .solve(rhs, tol)
        .map_err(|e| Error::NumericalFailure(format!("least squares: {e}")))?;
    let residual = (b * &sol - rhs).norm();
    Ok((sol, residual))
}

/// Moore-Penrose pseudo-inverse via SVD with a relative singular-value cutoff.
pub fn pseudo_inverse(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = b.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().fold(0.0f64, |m, &v| m.max(v));
    let tol = 1e-12 * max_sv.max(1.0);
    svd.pseudo_inverse(tol)
        .map_err(|e| Error::NumericalFailure(format!("pseudo-inverse: {e}")))
}

/// Numerical rank of a matrix via SVD with a relative cutoff.
pub fn rank(b: &DMatrix<f64>) -> usize {
    if b.nrows() == 0 || b.ncols() == 0 {
        return 0;
    }
    let svd = b.clone().svd(false, false);
    let max_sv = svd.singular_values.iter().fold(0.0f64, |m, &v| m.max(v));
    let tol = 1e-10 * max_sv.max(1.0);
    svd.singular_values.iter().filter(|&&v| v > tol).count()
}

/// Smallest singular value (zero for empty matrices).
pub fn min_singular_value(b: &DMatrix<f64>) -> f64 {
    if b.nrows() == 0 || b.ncols() == 0 {
        return 0.0;
    }
    let svd = b.clone().svd(false, false);
    svd.singular_values.iter().fold(f64::INFINITY, |a, &b| a.min(b))
}
