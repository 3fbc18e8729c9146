//! The log-det scaling objective `f(t) = ln det(sum_i e^{t_i} Q_i)` on the
//! hyperplane `sum_i t_i = 0`, parametrized by the first `n - 1` coordinates.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, log_det_from_cholesky};
use crate::quadric::GramSystem;

/// Weights `e^{t_1}, .., e^{t_{n-1}}, e^{-(t_1 + .. + t_{n-1})}`.
pub fn full_weights(t: &DVector<f64>) -> Vec<f64> {
    let mut w: Vec<f64> = t.iter().map(|v| v.exp()).collect();
    w.push((-t.sum()).exp());
    w
}

/// Full log-weight vector `(t_1, .., t_{n-1}, -sum t_j)`.
pub fn full_log_weights(t: &DVector<f64>) -> Vec<f64> {
    let mut full: Vec<f64> = t.iter().cloned().collect();
    full.push(-t.sum());
    full
}

pub fn scaled_sum(grams: &GramSystem, weights: &[f64]) -> DMatrix<f64> {
    let n = grams.dim();
    let mut s = DMatrix::zeros(n, n);
    for (q, w) in grams.grams().iter().zip(weights) {
        s += q * *w;
    }
    s
}

/// Objective state at one `t`: the factor of `S`, weights and the weighted
/// traces `tau_i = Tr(S^{-1} e^{t_i} Q_i)`.
pub(crate) struct ScalingPoint {
    pub value: f64,
    pub weights: Vec<f64>,
    pub chol: Cholesky<f64, Dyn>,
    pub tau: Vec<f64>,
}

impl ScalingPoint {
    pub fn new(t: &DVector<f64>, grams: &GramSystem) -> Result<Self> {
        let n = grams.dim();
        if t.len() + 1 != n {
            return Err(Error::Dimension(format!("t has length {}, expected {}", t.len(), n - 1)));
        }
        let weights = full_weights(t);
        if weights.iter().any(|w| !w.is_finite() || *w == 0.0) {
            return Err(Error::Degenerate("scaling weights overflowed".into()));
        }
        let s = scaled_sum(grams, &weights);
        let chol = cholesky(&s).ok_or_else(|| Error::Degenerate("scaled sum is not positive definite".into()))?;
        let value = log_det_from_cholesky(&chol);
        let s_inv = chol.inverse();
        let tau = grams
            .grams()
            .iter()
            .zip(&weights)
            .map(|(q, w)| w * s_inv.dot(q))
            .collect();
        Ok(ScalingPoint { value, weights, chol, tau })
    }

    pub fn gradient(&self) -> DVector<f64> {
        let last = *self.tau.last().expect("at least one gram");
        DVector::from_iterator(self.tau.len() - 1, self.tau[..self.tau.len() - 1].iter().map(|t| t - last))
    }
}

/// Value and gradient. Gradient entry `j` is `Tr(S^{-1}(e^{t_j} Q_j - E_n))`
/// with `E_n = e^{-(t_1 + .. + t_{n-1})} Q_n`.
pub fn scaling_objective(t: &DVector<f64>, grams: &GramSystem) -> Result<(f64, DVector<f64>)> {
    let p = ScalingPoint::new(t, grams)?;
    Ok((p.value, p.gradient()))
}

/// Exact Hessian of the objective:
///
/// `H_ij = -Tr(S^{-1} D_i S^{-1} D_j) + Tr(S^{-1} E_n) + [i = j] Tr(S^{-1} e^{t_i} Q_i)`
///
/// with `D_i = e^{t_i} Q_i - E_n`. The last term comes from differentiating
/// `e^{t_i}` inside `D_i` and is required for agreement with finite differences.
pub fn scaling_hessian(t: &DVector<f64>, grams: &GramSystem) -> Result<DMatrix<f64>> {
    let p = ScalingPoint::new(t, grams)?;
    Ok(hessian_at(&p, grams))
}

pub(crate) fn hessian_at(p: &ScalingPoint, grams: &GramSystem) -> DMatrix<f64> {
    let n = grams.dim();
    let m = n - 1;
    // M_i = S^{-1} e^{t_i} Q_i; Tr(M~_i M~_j) with M~_i = M_i - M_n.
    let solved: Vec<DMatrix<f64>> = grams
        .grams()
        .iter()
        .zip(&p.weights)
        .map(|(q, w)| p.chol.solve(q) * *w)
        .collect();
    let last = &solved[m];
    let mut rows = DMatrix::zeros(m, n * n);
    let mut rows_t = DMatrix::zeros(m, n * n);
    for i in 0..m {
        let d = &solved[i] - last;
        for a in 0..n {
            for b in 0..n {
                rows[(i, a * n + b)] = d[(a, b)];
                rows_t[(i, b * n + a)] = d[(a, b)];
            }
        }
    }
    let cross = &rows * rows_t.transpose();
    let tr_en = p.tau[m];
    let mut h = DMatrix::from_fn(m, m, |i, j| -cross[(i, j)] + tr_en);
    for i in 0..m {
        h[(i, i)] += p.tau[i];
    }
    (&h + h.transpose()) * 0.5
}
