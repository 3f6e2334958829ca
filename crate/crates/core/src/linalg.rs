//! Dense linear-algebra helpers shared by every module.
//!
//! All symmetric positive-definite (SPD) work goes through [`spd_cholesky`],
//! which applies one acceptance policy: the matrix must be finite, symmetric
//! to a relative tolerance, factor with Cholesky, and every squared pivot must
//! exceed `1e-12 · trace`. Failures are errors; nothing is silently
//! regularized.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{dim, Error, Result};

/// Relative pivot threshold for SPD acceptance.
pub const SPD_PIVOT_REL: f64 = 1e-12;

/// Relative asymmetry allowed on inputs to [`spd_cholesky`].
pub const SYMMETRY_REL: f64 = 1e-8;

pub type Chol = Cholesky<f64, Dyn>;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Cholesky factorization under the shared SPD policy. `what` names the
/// matrix in the error message.
pub fn spd_cholesky(m: &DMatrix<f64>, what: &str) -> Result<Chol> {
    if !m.is_square() {
        return Err(dim(format!("{what} must be square, got {}x{}", m.nrows(), m.ncols())));
    }
    if m.nrows() == 0 {
        return Err(dim(format!("{what} is empty")));
    }
    if !all_finite(m) {
        return Err(Error::NotPositiveDefinite { what: format!("{what} (non-finite entries)") });
    }
    let scale = 1.0 + max_abs(m);
    let asym = max_abs(&(m - m.transpose()));
    if asym > SYMMETRY_REL * scale {
        return Err(Error::NotPositiveDefinite { what: format!("{what} (asymmetric by {asym:e})") });
    }
    let sym = symmetrize(m);
    let trace = sym.trace();
    let chol = Cholesky::new(sym).ok_or_else(|| Error::NotPositiveDefinite { what: what.to_string() })?;
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |a, v| a.min(v * v));
    if !(trace > 0.0) || min_pivot <= SPD_PIVOT_REL * trace {
        return Err(Error::NotPositiveDefinite { what: what.to_string() });
    }
    Ok(chol)
}

pub fn is_spd(m: &DMatrix<f64>) -> bool {
    spd_cholesky(m, "matrix").is_ok()
}

/// `log |M|` from a Cholesky factor.
pub fn log_det(chol: &Chol) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(symmetrize(&spd_cholesky(m, what)?.inverse()))
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = M`.
pub fn lower_factor(chol: &Chol) -> DMatrix<f64> {
    chol.l()
}

/// Solves `L z = b` for lower-triangular `L`, column by column.
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.solve_lower_triangular(b).expect("triangular factor with nonzero diagonal")
}

/// `diag(w) · M` (row scaling).
pub fn scale_rows(m: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (mut row, wi) in out.row_iter_mut().zip(w.iter()) {
        row *= *wi;
    }
    out
}

/// Numerical rank with threshold `rows · σ_max · 1e-12`, plus the singular
/// values in descending order.
pub fn numerical_rank(m: &DMatrix<f64>) -> (usize, Vec<f64>) {
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let smax = sv.first().copied().unwrap_or(0.0);
    let tol = m.nrows() as f64 * smax * 1e-12;
    let rank = sv.iter().filter(|s| **s > tol).count();
    (rank, sv)
}

/// Largest eigenvalue of a symmetric matrix.
pub fn lambda_max(m: &DMatrix<f64>) -> f64 {
    symmetrize(m).symmetric_eigenvalues().iter().fold(f64::NEG_INFINITY, |a, v| a.max(*v))
}

/// Horizontal concatenation `(a, b)`.
pub fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indefinite_and_near_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(spd_cholesky(&m, "m").is_err());
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-14]);
        assert!(spd_cholesky(&m, "m").is_err());
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(spd_cholesky(&m, "m").is_err());
    }

    #[test]
    fn log_det_and_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let c = spd_cholesky(&m, "m").unwrap();
        assert!((log_det(&c) - 11.0_f64.ln()).abs() < 1e-14);
        let inv = spd_inverse(&m, "m").unwrap();
        assert!((&m * &inv - DMatrix::identity(2, 2)).amax() < 1e-14);
    }

    #[test]
    fn rank_of_duplicated_column() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert_eq!(numerical_rank(&x).0, 1);
    }
}
