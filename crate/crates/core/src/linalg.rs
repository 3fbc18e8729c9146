//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

/// Cholesky factorization, `None` when `m` is not numerically positive definite.
pub fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let chol = Cholesky::new(m.clone())?;
    if chol.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
        Some(chol)
    } else {
        None
    }
}

/// `ln det m` from a Cholesky factor.
pub fn log_det_from_cholesky(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Symmetric inverse square root `S^{-1/2}` via eigendecomposition.
///
/// Eigenvalues below `floor_rel * lambda_max` make the matrix degenerate.
pub fn inverse_sqrt_spd(s: &DMatrix<f64>, floor_rel: f64) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(s));
    let lambda_max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(lambda_max > 0.0) || !lambda_max.is_finite() {
        return Err(Error::Degenerate("scaled sum has no positive eigenvalue".into()));
    }
    let floor = floor_rel * lambda_max;
    if let Some(bad) = eig.eigenvalues.iter().find(|&&l| l < floor) {
        return Err(Error::Degenerate(format!(
            "scaled sum eigenvalue {bad:e} below floor {floor:e}"
        )));
    }
    let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    let v = &eig.eigenvectors;
    let scaled = DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] * inv_sqrt[j]);
    Ok(symmetrize(&(scaled * v.transpose())))
}

/// `ln |det a|` of a row-major `n x n` buffer by Gaussian elimination with
/// partial pivoting. The buffer is overwritten. Returns `None` when singular.
pub fn log_abs_det_in_place(a: &mut [f64], n: usize) -> Option<f64> {
    debug_assert_eq!(a.len(), n * n);
    let mut log_abs = 0.0;
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for row in col + 1..n {
            let v = a[row * n + col].abs();
            if v > best {
                best = v;
                piv = row;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
        }
        let d = a[col * n + col];
        log_abs += d.abs().ln();
        for row in col + 1..n {
            let f = a[row * n + col] / d;
            if f != 0.0 {
                for k in col + 1..n {
                    a[row * n + k] -= f * a[col * n + k];
                }
            }
        }
    }
    Some(log_abs)
}

pub fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "expected {} entries for a {rows}x{cols} matrix, got {}",
            rows * cols,
            data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

/// Numerical rank from singular values with a relative cutoff.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_abs_det_matches_nalgebra() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.5, 4.0, 0.3, 1.0, -2.0, 7.0, 3.0]);
        let mut buf = to_row_major(&m);
        let got = log_abs_det_in_place(&mut buf, 3).unwrap();
        assert!((got - m.determinant().abs().ln()).abs() < 1e-12);
    }

    #[test]
    fn singular_matrix_has_no_log_det() {
        let mut buf = vec![1.0, 2.0, 2.0, 4.0];
        assert!(log_abs_det_in_place(&mut buf, 2).is_none());
    }

    #[test]
    fn inverse_sqrt_squares_to_inverse() {
        let s = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let z = inverse_sqrt_spd(&s, 1e-14).unwrap();
        let prod = &z * &s * &z;
        assert!((prod - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn inverse_sqrt_rejects_singular() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(inverse_sqrt_spd(&s, 1e-14).unwrap_err().is_degenerate());
    }
}
