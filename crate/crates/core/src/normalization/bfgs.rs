//! Dense BFGS with an Armijo backtracking line search.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct BfgsOptions {
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
    pub armijo_c: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            gradient_tolerance: 1e-10,
            max_iterations: 500,
            armijo_c: 1e-4,
            shrink: 0.5,
            max_backtracks: 60,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BfgsOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl BfgsOutcome {
    pub fn gradient_norm(&self) -> f64 {
        self.gradient.amax()
    }
}

/// Minimizes `f`, which returns value and gradient. Points where `f` reports a
/// degenerate error are treated as `+inf` by the line search; a degenerate
/// starting point is an error.
pub fn minimize<F>(f: F, x0: DVector<f64>, opts: &BfgsOptions) -> Result<BfgsOutcome>
where
    F: Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let m = x0.len();
    let (mut value, mut grad) = f(&x0)?;
    let mut x = x0;
    let mut h_inv = DMatrix::<f64>::identity(m, m);
    let mut fresh = true;
    let mut iterations = 0;

    while grad.amax() > opts.gradient_tolerance && iterations < opts.max_iterations {
        let mut dir = -(&h_inv * &grad);
        let mut slope = grad.dot(&dir);
        if !(slope < 0.0) {
            h_inv.fill_with_identity();
            fresh = true;
            dir = -grad.clone();
            slope = grad.dot(&dir);
        }

        // Values below the rounding floor of ln det cannot be compared, so a
        // step that does not raise f beyond that floor is accepted.
        let noise = 16.0 * f64::EPSILON * value.abs().max(1.0);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let trial = &x + &dir * alpha;
            match f(&trial) {
                Ok((v, g)) if v.is_finite() && v <= value + opts.armijo_c * alpha * slope + noise => {
                    accepted = Some((trial, v, g));
                    break;
                }
                Ok(_) | Err(Error::Degenerate(_)) => alpha *= opts.shrink,
                Err(e) => return Err(e),
            }
        }
        iterations += 1;

        let Some((x_new, v_new, g_new)) = accepted else {
            if fresh {
                break;
            }
            h_inv.fill_with_identity();
            fresh = true;
            continue;
        };

        let s = &x_new - &x;
        let y = &g_new - &grad;
        let sy = s.dot(&y);
        if sy > 1e-300 && sy.is_finite() {
            if fresh {
                // Nocedal-Wright initial scaling.
                h_inv *= sy / y.norm_squared();
            }
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            // H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T, expanded.
            h_inv.ger(-rho, &hy, &s, 1.0);
            h_inv.ger(-rho, &s, &hy, 1.0);
            h_inv.ger(rho * rho * yhy + rho, &s, &s, 1.0);
            fresh = false;
        }
        x = x_new;
        value = v_new;
        grad = g_new;
    }

    let converged = grad.amax() <= opts.gradient_tolerance;
    Ok(BfgsOutcome { x, value, gradient: grad, iterations, converged })
}
