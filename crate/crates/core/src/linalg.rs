//! Small dense linear algebra used by the analysis routines.
//!
//! Everything here works on `nalgebra` dynamic matrices; the games we deal
//! with have a handful of players, so dense LU and a real Schur
//! decomposition are more than enough.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Largest 1-norm condition number accepted by [`solve`].
pub const MAX_CONDITION: f64 = 1e12;

/// Real parts must be below `-HURWITZ_MARGIN` for a matrix to count as Hurwitz.
pub const HURWITZ_MARGIN: f64 = 1e-12;

const SCHUR_EPS: f64 = 1e-14;
const SCHUR_MAX_ITER: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: matrix is {rows}x{cols}, vector has length {len}")]
    DimensionMismatch { rows: usize, cols: usize, len: usize },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("matrix is singular or ill-conditioned (condition estimate {condition:e})")]
    Singular { condition: f64 },
    #[error("eigenvalue iteration did not converge")]
    EigenFailure,
}

fn ensure_square(m: &DMatrix<f64>) -> Result<(), LinalgError> {
    if m.nrows() != m.ncols() {
        return Err(LinalgError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(())
}

/// Induced 1-norm (maximum absolute column sum).
pub fn norm_1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Induced infinity-norm (maximum absolute row sum).
pub fn norm_inf(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// 1-norm condition number via an explicit LU inverse. Returns `+inf` when
/// the matrix is exactly singular.
pub fn condition_1(m: &DMatrix<f64>) -> Result<f64, LinalgError> {
    ensure_square(m)?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    match m.clone().lu().try_inverse() {
        Some(inv) => {
            let c = norm_1(m) * norm_1(&inv);
            Ok(if c.is_finite() { c } else { f64::INFINITY })
        }
        None => Ok(f64::INFINITY),
    }
}

/// Solves `m x = rhs` by LU with partial pivoting, refusing matrices whose
/// condition estimate exceeds [`MAX_CONDITION`].
pub fn solve(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
    ensure_square(m)?;
    if rhs.len() != m.nrows() {
        return Err(LinalgError::DimensionMismatch {
            rows: m.nrows(),
            cols: m.ncols(),
            len: rhs.len(),
        });
    }
    let condition = condition_1(m)?;
    if !(condition <= MAX_CONDITION) {
        return Err(LinalgError::Singular { condition });
    }
    m.clone()
        .lu()
        .solve(rhs)
        .ok_or(LinalgError::Singular { condition })
}

/// Eigenvalues as `(re, im)` pairs, from a real Schur decomposition.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<(f64, f64)>, LinalgError> {
    ensure_square(m)?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let schur = m
        .clone()
        .try_schur(SCHUR_EPS, SCHUR_MAX_ITER)
        .ok_or(LinalgError::EigenFailure)?;
    let eig = schur.complex_eigenvalues();
    let out: Vec<(f64, f64)> = eig.iter().map(|z| (z.re, z.im)).collect();
    if out.iter().any(|(re, im)| !re.is_finite() || !im.is_finite()) {
        return Err(LinalgError::EigenFailure);
    }
    Ok(out)
}

/// True iff every eigenvalue has real part below `-HURWITZ_MARGIN`.
pub fn is_hurwitz(m: &DMatrix<f64>) -> Result<bool, LinalgError> {
    Ok(eigenvalues(m)?
        .iter()
        .all(|&(re, _)| re < -HURWITZ_MARGIN))
}

/// Strict row diagonal dominance with a positive diagonal. Exact floating
/// comparisons; equality is not dominance.
pub fn is_strictly_diag_dominant_positive(m: &DMatrix<f64>) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    (0..m.nrows()).all(|i| {
        let d = m[(i, i)];
        let off: f64 = (0..m.ncols())
            .filter(|&j| j != i)
            .map(|j| m[(i, j)].abs())
            .sum();
        d > 0.0 && d > off
    })
}
