//! Closed-form Gaussian average-case quantities for random quadric systems.
//!
//! Every formula is evaluated in log-space so it stays finite for large `n`.

use std::f64::consts::{LN_2, PI};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// `sqrt(2) e^{1/2} / sqrt(pi)`: expected root count is `C1 n^{-1/2} 2^{n/2}`.
pub const ROOT_COUNT_CONSTANT: f64 = 1.315_489_246_958_914_4;

fn check_dim(n: usize, min: usize) -> Result<()> {
    if n < min {
        return Err(Error::Invalid(format!("n must be at least {min}, got {n}")));
    }
    Ok(())
}

/// Expected number of real solutions of a Gaussian system of `n` quadrics,
/// `n^{-1/2} 2^{(n+1)/2} e^{1/2} / sqrt(pi)`.
pub fn expected_root_count(n: usize) -> Result<f64> {
    check_dim(n, 2)?;
    let nf = n as f64;
    let log = -0.5 * nf.ln() + 0.5 * (nf + 1.0) * LN_2 + 0.5 - 0.5 * PI.ln();
    Ok(log.exp())
}

/// `E|det(PX)|` for `X` an `n x (n-1)` standard Gaussian and `P` the projector
/// orthogonal to the all-ones vector, read as the `(n-1)`-volume
/// `sqrt(det((PX)^T PX))`: `2^{(n-1)/2} Gamma(n/2) / sqrt(pi)`.
pub fn expected_absdet_projected(n: usize) -> Result<f64> {
    check_dim(n, 2)?;
    let nf = n as f64;
    Ok((0.5 * (nf - 1.0) * LN_2 + ln_gamma(nf / 2.0) - 0.5 * PI.ln()).exp())
}

/// The textbook form `2^{(n-2)/2} Gamma((n-1)/2) / sqrt(pi)`, which equals
/// [`expected_absdet_projected`] at `n - 1`.
pub fn expected_absdet_projected_as_printed(n: usize) -> Result<f64> {
    check_dim(n, 2)?;
    let nf = n as f64;
    Ok((0.5 * (nf - 2.0) * LN_2 + ln_gamma((nf - 1.0) / 2.0) - 0.5 * PI.ln()).exp())
}

/// Log of `int_0^inf u^{n^2-n} e^{-n u^2 / 2} du
/// = 2^{(n^2-n-1)/2} n^{-(n^2-n+1)/2} Gamma((n^2-n+1)/2)`.
pub fn gaussian_tail_moment(n: usize) -> Result<f64> {
    check_dim(n, 2)?;
    let nf = n as f64;
    let k = nf * nf - nf;
    Ok(0.5 * (k - 1.0) * LN_2 - 0.5 * (k + 1.0) * nf.ln() + ln_gamma(0.5 * (k + 1.0)))
}

/// Surface area of the unit sphere in `R^n`, `2 pi^{n/2} / Gamma(n/2)`. With
/// `printed_exponent` the `pi` exponent is `(n-1)/2` instead.
pub fn sphere_area(n: usize, printed_exponent: bool) -> Result<f64> {
    check_dim(n, 1)?;
    let nf = n as f64;
    let exponent = if printed_exponent { (nf - 1.0) / 2.0 } else { nf / 2.0 };
    Ok((LN_2 + exponent * PI.ln() - ln_gamma(nf / 2.0)).exp())
}

/// Monte-Carlo estimate of `E|det(PX)|` with its standard error.
pub fn absdet_projected_monte_carlo<R: Rng + ?Sized>(n: usize, samples: usize, rng: &mut R) -> Result<(f64, f64)> {
    check_dim(n, 2)?;
    if samples < 2 {
        return Err(Error::Invalid("need at least two samples".into()));
    }
    let proj = DMatrix::<f64>::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let x = DMatrix::<f64>::from_fn(n, n - 1, |_, _| rng.sample(StandardNormal));
        let px = &proj * x;
        let v = (px.transpose() * &px).determinant().max(0.0).sqrt();
        sum += v;
        sum_sq += v * v;
    }
    let m = samples as f64;
    let mean = sum / m;
    let var = (sum_sq / m - mean * mean).max(0.0) * m / (m - 1.0);
    Ok((mean, (var / m).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub n: usize,
    pub expected_count: f64,
    pub absdet_projected: f64,
    pub sphere_area: f64,
    /// Natural log of the tail moment.
    pub gaussian_tail_moment: f64,
}

impl BaselineReport {
    pub fn new(n: usize) -> Result<Self> {
        Ok(BaselineReport {
            n,
            expected_count: expected_root_count(n)?,
            absdet_projected: expected_absdet_projected(n)?,
            sphere_area: sphere_area(n, false)?,
            gaussian_tail_moment: gaussian_tail_moment(n)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        #[allow(clippy::too_many_arguments)]
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        rec(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 50)
    }

    #[test]
    fn root_count_values() {
        assert!((expected_root_count(10).unwrap() - 13.311_815).abs() < 1e-5);
        assert!((expected_root_count(2).unwrap() - 1.860_383).abs() < 1e-5);
        assert!(expected_root_count(1).is_err());
        let c1 = 2f64.sqrt() * 0.5f64.exp() / PI.sqrt();
        assert!((ROOT_COUNT_CONSTANT - c1).abs() < 1e-15);
        for n in 2..30 {
            let direct = c1 * (n as f64).powf(-0.5) * 2f64.powf(n as f64 / 2.0);
            assert!((expected_root_count(n).unwrap() - direct).abs() <= 1e-12 * direct);
        }
    }

    #[test]
    fn root_count_ratio_identity() {
        for n in 2..100 {
            let r = expected_root_count(n + 2).unwrap() / expected_root_count(n).unwrap();
            let expected = 2.0 * (n as f64 / (n as f64 + 2.0)).sqrt();
            assert!((r - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn far_below_bezout() {
        for n in 4..=200 {
            let log_ratio = expected_root_count(n).unwrap().ln() - n as f64 * LN_2;
            assert!(log_ratio < 0.5f64.ln());
        }
    }

    #[test]
    fn absdet_values() {
        assert!((expected_absdet_projected_as_printed(2).unwrap() - 1.0).abs() < 1e-14);
        assert!((expected_absdet_projected_as_printed(3).unwrap() - (2.0 / PI).sqrt()).abs() < 1e-14);
        for n in 3..20 {
            let a = expected_absdet_projected(n - 1).unwrap();
            let b = expected_absdet_projected_as_printed(n).unwrap();
            assert!((a - b).abs() < 1e-12 * a);
        }
    }

    #[test]
    fn absdet_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (mean, se) = absdet_projected_monte_carlo(4, 100_000, &mut rng).unwrap();
        let exact = expected_absdet_projected(4).unwrap();
        assert!((mean - exact).abs() <= 3.0 * se, "mc {mean} +- {se} vs {exact}");
    }

    #[test]
    fn tail_moment_values() {
        let expected = (PI.sqrt() / 4.0).ln();
        assert!((gaussian_tail_moment(2).unwrap() - expected).abs() < 1e-14);

        let f = |u: f64| u.powi(6) * (-1.5 * u * u).exp();
        // Unit panels so the initial Simpson estimate cannot miss the bulk.
        let quad: f64 = (0..30).map(|k| simpson(&f, k as f64, k as f64 + 1.0, 1e-16)).sum();
        let log = gaussian_tail_moment(3).unwrap();
        assert!((quad.ln() - log).abs() <= 1e-8 * log.abs().max(1.0));
        assert!((quad - log.exp()).abs() <= 1e-8 * quad);
    }

    #[test]
    fn tail_moment_monotone_from_three() {
        // The log moment dips from n = 2 to n = 3 before increasing.
        assert!(gaussian_tail_moment(3).unwrap() < gaussian_tail_moment(2).unwrap());
        for n in 3..=10 {
            assert!(gaussian_tail_moment(n + 1).unwrap() > gaussian_tail_moment(n).unwrap());
        }
    }

    #[test]
    fn sphere_areas() {
        assert!((sphere_area(1, false).unwrap() - 2.0).abs() < 1e-14);
        assert!((sphere_area(2, false).unwrap() - 2.0 * PI).abs() < 1e-13);
        assert!((sphere_area(3, false).unwrap() - 4.0 * PI).abs() < 1e-13);
        assert!((sphere_area(3, true).unwrap() - 4.0 * PI.sqrt()).abs() < 1e-13);
        assert!(sphere_area(0, false).is_err());
    }

    #[test]
    fn report_is_finite_up_to_200() {
        for n in 2..=200 {
            let r = BaselineReport::new(n).unwrap();
            for v in [r.expected_count, r.absdet_projected, r.gaussian_tail_moment] {
                assert!(v.is_finite(), "n = {n}");
            }
            assert!(r.expected_count > 0.0 && r.absdet_projected > 0.0 && r.sphere_area >= 0.0);
        }
    }
}
