//! Small dense symmetric linear algebra used by the solvers.

use alloc::format;
use alloc::string::String;
use nalgebra::{DMatrix, DVector};

/// Tolerance on minimum eigenvalues in semidefiniteness tests.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Largest condition number accepted for the gain matrix `R + P D'D`.
pub const MAX_CONDITION: f64 = 1e12;

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
    (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol * scale))
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    let mut ev = if m.nrows() == 1 {
        DVector::from_element(1, m[(0, 0)])
    } else {
        m.clone().symmetric_eigenvalues()
    };
    ev.as_mut_slice().sort_by(f64::total_cmp);
    ev
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let ev = symmetric_eigenvalues(m);
    ev[0]
}

/// Solves `m x = rhs` for symmetric positive-definite `m` via Cholesky.
///
/// Fails with a reason string when `m` is not positive definite or its
/// condition number exceeds [`MAX_CONDITION`]. The inverse is never formed.
pub fn solve_spd(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>, String> {
    if m.nrows() == 1 {
        let a = m[(0, 0)];
        if !(a > 0.0) {
            return Err(format!("matrix not positive definite (value {a:e})"));
        }
        return Ok(rhs / a);
    }
    let ev = symmetric_eigenvalues(m);
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    if !(lo > 0.0) {
        return Err(format!("matrix not positive definite (min eigenvalue {lo:e})"));
    }
    if hi / lo > MAX_CONDITION {
        return Err(format!("condition number {:e} exceeds {MAX_CONDITION:e}", hi / lo));
    }
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| String::from("Cholesky factorization failed"))?;
    Ok(chol.solve(rhs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_spd_system() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let rhs = DVector::from_row_slice(&[1.0, 2.0]);
        let x = solve_spd(&m, &rhs).unwrap();
        let back = &m * &x;
        assert!((back - rhs).norm() < 1e-14);
    }

    #[test]
    fn rejects_indefinite_and_ill_conditioned() {
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(solve_spd(&indef, &DVector::zeros(2)).is_err());
        let ill = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-14]);
        let err = solve_spd(&ill, &DVector::zeros(2)).unwrap_err();
        assert!(err.contains("condition"));
        let zero = DMatrix::from_element(1, 1, 0.0);
        assert!(solve_spd(&zero, &DVector::zeros(1)).is_err());
    }

    #[test]
    fn eigenvalues_sorted() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 5.0]);
        let ev = symmetric_eigenvalues(&m);
        assert_eq!(ev.as_slice(), &[-1.0, 2.0, 5.0]);
        assert!(is_symmetric(&m, 1e-12));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(!is_symmetric(&asym, 1e-12));
    }
}
