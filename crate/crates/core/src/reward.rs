//! Monte-Carlo Kac-Rice estimate of the expected number of real solutions of
//! the perturbed system `||(C_j + delta X_j) x||^2 = c_j`.
//!
//! For each point `x` a pivot coordinate `i` is fixed. For each sampled tuple the
//! `(i, i)` gram entry of every equation is replaced by the value `g_j` that makes
//! the equation hold at `x`, and the sample is weighted by the Gaussian density
//! ratio of that substitution times `|det D_x G|`.

use std::collections::BTreeSet;
use std::sync::Mutex;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::log_abs_det_in_place;
use crate::normalization::{normalize, normalize_at, NormalizedSystem, ScalingOptions};
use crate::quadric::QuadricSystem;
use crate::seeding::{rng_from, stream};

/// Smallest pivot magnitude accepted for conditioning.
pub const PIVOT_GUARD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub delta: f64,
    pub num_points: usize,
    pub num_tuples: usize,
    /// Annulus tolerance; `None` means `max(4 / sqrt(n), 0.1)`.
    pub epsilon: Option<f64>,
    pub seed: u64,
    pub workers: usize,
    pub log_space: bool,
    /// Divide the density-ratio exponents by the variance of a perturbed gram
    /// diagonal entry instead of using unit variance.
    pub variance_rescale: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            delta: 0.05,
            num_points: 100_000,
            num_tuples: 2500,
            epsilon: None,
            seed: 0,
            workers: 1,
            log_space: true,
            variance_rescale: false,
        }
    }
}

impl RewardConfig {
    pub fn auto_epsilon(n: usize) -> f64 {
        (4.0 / (n as f64).sqrt()).max(0.1)
    }

    pub fn epsilon_for(&self, n: usize) -> f64 {
        self.epsilon.unwrap_or_else(|| Self::auto_epsilon(n))
    }

    /// Checks the configuration against dimension `n`. Sample-size
    /// recommendations (`M > n^2`, `N > n^4`) are returned as warnings.
    pub fn validate(&self, n: usize) -> Result<Vec<String>> {
        if n == 0 {
            return Err(Error::Invalid("dimension must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0 / n as f64) {
            return Err(Error::Invalid(format!("delta = {} must lie in (0, 1/{n}]", self.delta)));
        }
        if self.num_points == 0 || self.num_tuples == 0 {
            return Err(Error::Invalid("num_points and num_tuples must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Invalid("workers must be at least 1".into()));
        }
        let eps = self.epsilon_for(n);
        check_epsilon(n, eps)?;
        let mut warnings = Vec::new();
        if self.num_tuples <= n * n {
            warnings.push(format!("num_tuples = {} does not exceed n^2 = {}", self.num_tuples, n * n));
        }
        if (self.num_points as f64) <= (n as f64).powi(4) {
            warnings.push(format!("num_points = {} does not exceed n^4 = {}", self.num_points, n.pow(4)));
        }
        Ok(warnings)
    }
}

fn check_epsilon(n: usize, eps: f64) -> Result<()> {
    let min = 4.0 / (n as f64).sqrt();
    if !(eps.is_finite() && eps > 0.0 && eps >= min * (1.0 - 1e-12)) {
        return Err(Error::Invalid(format!("epsilon = {eps} must be at least 4/sqrt(n) = {min}")));
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardEstimate {
    pub value: f64,
    pub std_error: f64,
    /// Natural log of `value`; `-inf` when every sample contributed zero
    /// (serialized as `null`).
    #[serde(with = "log_or_null")]
    pub log_value: f64,
    pub accepted_points: usize,
    pub rejected_points: usize,
    pub pivot_fallbacks: usize,
    /// Points dropped because the pivot coordinate was below [`PIVOT_GUARD`].
    pub discarded_points: usize,
    /// (tuple, point) samples dropped for a non-finite contribution.
    pub nonfinite_samples: usize,
    pub epsilon: f64,
    /// Normalization was degenerate; the reward is 0 by convention.
    pub degenerate: bool,
    /// Normalization stopped at its iteration budget; the estimate uses the best iterate.
    pub not_converged: bool,
}

mod log_or_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        v.is_finite().then_some(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

impl RewardEstimate {
    fn degenerate() -> Self {
        RewardEstimate { log_value: f64::NEG_INFINITY, degenerate: true, ..Default::default() }
    }
}

#[derive(Clone, Debug)]
pub struct AnnulusSample {
    pub points: Vec<DVector<f64>>,
    pub accepted: usize,
    pub rejected: usize,
}

/// Norm bounds `(1 - eps) sqrt(n) <= ||x|| <= sqrt(n) / (1 - eps)`. For
/// `eps >= 1` the shell covers all of space.
pub fn annulus_bounds(n: usize, epsilon: f64) -> (f64, f64) {
    let r = (n as f64).sqrt();
    if epsilon < 1.0 {
        ((1.0 - epsilon) * r, r / (1.0 - epsilon))
    } else {
        (0.0, f64::INFINITY)
    }
}

/// Draws standard Gaussian vectors and keeps those inside the annulus until
/// `count` are accepted. Exhausting a budget of `10 * count` draws is a
/// sampling anomaly.
pub fn sample_annulus<R: Rng + ?Sized>(n: usize, count: usize, epsilon: f64, rng: &mut R) -> Result<AnnulusSample> {
    check_epsilon(n, epsilon)?;
    let (lo, hi) = annulus_bounds(n, epsilon);
    sample_shell(n, count, lo, hi, rng)
}

fn sample_shell<R: Rng + ?Sized>(n: usize, count: usize, lo: f64, hi: f64, rng: &mut R) -> Result<AnnulusSample> {
    let budget = count.saturating_mul(10).max(10);
    let mut points = Vec::with_capacity(count);
    let mut draws = 0;
    while points.len() < count {
        if draws >= budget {
            return Err(Error::SamplingAnomaly { accepted: points.len(), draws });
        }
        draws += 1;
        let x = DVector::<f64>::from_fn(n, |_, _| rng.sample(StandardNormal));
        let norm = x.norm();
        if norm >= lo && norm <= hi {
            points.push(x);
        }
    }
    Ok(AnnulusSample { accepted: points.len(), rejected: draws - points.len(), points })
}

/// Fraction of `draws` standard Gaussian vectors falling in the annulus.
pub fn annulus_acceptance<R: Rng + ?Sized>(n: usize, epsilon: f64, draws: usize, rng: &mut R) -> f64 {
    let (lo, hi) = annulus_bounds(n, epsilon);
    let mut hits = 0;
    for _ in 0..draws {
        let x = DVector::<f64>::from_fn(n, |_, _| rng.sample(StandardNormal));
        let norm = x.norm();
        if norm >= lo && norm <= hi {
            hits += 1;
        }
    }
    hits as f64 / draws as f64
}

/// Index of the median-magnitude coordinate among those with `x_j^2 >= 1/2`
/// (lower middle for even counts, lowest index among ties). The flag is true
/// when no coordinate qualifies and the largest-magnitude one is used instead.
pub fn select_pivot(x: &DVector<f64>) -> (usize, bool) {
    let mut mags: Vec<f64> = x.iter().filter(|v| *v * *v >= 0.5).map(|v| v.abs()).collect();
    if mags.is_empty() {
        let mut best = 0;
        for (j, v) in x.iter().enumerate() {
            if v.abs() > x[best].abs() {
                best = j;
            }
        }
        return (best, true);
    }
    mags.sort_by(|a, b| a.total_cmp(b));
    let median = mags[(mags.len() - 1) / 2];
    let idx = x
        .iter()
        .position(|v| v * v >= 0.5 && v.abs() == median)
        .expect("median is attained");
    (idx, false)
}

fn quad_form(q: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(q * x))
}

/// The conditioned `(i, i)` gram entry
/// `g = x_i^{-2} (c - x^T A^T A x + (A^T A)_{ii} x_i^2)`.
pub fn condition_entry(a: &DMatrix<f64>, c: f64, x: &DVector<f64>, i: usize) -> Result<f64> {
    let xi = x[i];
    if xi.abs() < PIVOT_GUARD {
        return Err(Error::PivotDegenerate { value: xi });
    }
    let q = a.transpose() * a;
    Ok((c - quad_form(&q, x)) / (xi * xi) + q[(i, i)])
}

/// Mean parameter of the `(i, i)` gram entry in the density ratio: the
/// unperturbed gram entry `(C^T C)_{ii}`.
pub fn reference_entry(unit_factor: &DMatrix<f64>, i: usize) -> f64 {
    unit_factor.column(i).norm_squared()
}

/// Variance of `(A^T A)_{ii}` for `A = C + delta X`:
/// `4 delta^2 ||C e_i||^2 + 2 n delta^4`.
pub fn entry_variance(unit_factor: &DMatrix<f64>, i: usize, delta: f64) -> f64 {
    let n = unit_factor.nrows() as f64;
    4.0 * delta * delta * reference_entry(unit_factor, i) + 2.0 * n * delta.powi(4)
}

/// Log density ratio `sum_j [(a_ii - b_ii)^2 - (g_j - b_ii)^2] / 2` of
/// replacing each sampled entry `a_ii` by its conditioned value `g_j`.
pub fn importance_weight(
    sampled: &[DMatrix<f64>],
    unit_factors: &[DMatrix<f64>],
    c: &[f64],
    x: &DVector<f64>,
    i: usize,
) -> Result<f64> {
    let mut log_w = 0.0;
    for ((a, cf), cj) in sampled.iter().zip(unit_factors).zip(c) {
        let g = condition_entry(a, *cj, x, i)?;
        let aii = a.column(i).norm_squared();
        let b = reference_entry(cf, i);
        log_w += 0.5 * ((aii - b).powi(2) - (g - b).powi(2));
    }
    if !log_w.is_finite() {
        return Err(Error::Numerical("non-finite importance weight".into()));
    }
    Ok(log_w)
}

/// Jacobian of `x -> (g(A_1, c_1, x), .., g(A_n, c_n, x))`:
/// row `j` is `-2 x_i^{-2} (Q_j x + (c_j - x^T Q_j x) e_i / x_i)`.
pub fn jacobian_dxg(a: &[DMatrix<f64>], c: &[f64], x: &DVector<f64>, i: usize) -> Result<DMatrix<f64>> {
    let n = x.len();
    if a.len() != c.len() {
        return Err(Error::Dimension("one rhs per factor required".into()));
    }
    let xi = x[i];
    if xi.abs() < PIVOT_GUARD {
        return Err(Error::PivotDegenerate { value: xi });
    }
    let scale = -2.0 / (xi * xi);
    let mut jac = DMatrix::zeros(a.len(), n);
    for (j, (aj, cj)) in a.iter().zip(c).enumerate() {
        let qx = aj.transpose() * (aj * x);
        let resid = cj - x.dot(&qx);
        let mut row = qx;
        row[i] += resid / xi;
        jac.set_row(j, &(row * scale).transpose());
    }
    Ok(jac)
}

/// A sample point with its pivot.
#[derive(Clone, Debug)]
pub struct PivotedPoint {
    pub x: DVector<f64>,
    pub pivot: usize,
}

#[derive(Clone, Debug)]
pub struct PreparedPoints {
    pub points: Vec<PivotedPoint>,
    pub accepted: usize,
    pub rejected: usize,
    pub pivot_fallbacks: usize,
    pub discarded: usize,
    pub epsilon: f64,
}

/// Draws the `N` annulus points shared by every tuple and fixes their pivots.
pub fn prepare_points(n: usize, cfg: &RewardConfig) -> Result<PreparedPoints> {
    let epsilon = cfg.epsilon_for(n);
    let mut rng = rng_from(cfg.seed, &[stream::POINTS]);
    let sample = sample_annulus(n, cfg.num_points, epsilon, &mut rng)?;
    let mut points = Vec::with_capacity(sample.points.len());
    let mut fallbacks = 0;
    let mut discarded = 0;
    for x in sample.points {
        let (pivot, fallback) = select_pivot(&x);
        fallbacks += fallback as usize;
        if x[pivot].abs() < PIVOT_GUARD {
            discarded += 1;
            continue;
        }
        points.push(PivotedPoint { x, pivot });
    }
    Ok(PreparedPoints {
        points,
        accepted: sample.accepted,
        rejected: sample.rejected,
        pivot_fallbacks: fallbacks,
        discarded,
        epsilon,
    })
}

/// Inner average over points for one tuple.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TupleAverage {
    /// Log of the mean contribution (log-space mode) or the mean itself.
    pub log_mean: f64,
    pub used: usize,
    pub nonfinite: usize,
}

/// Draws tuple `index` from its own stream: `A_j = C_j + delta X_j`.
pub fn draw_tuple(ns: &NormalizedSystem, delta: f64, seed: u64, index: usize) -> Vec<DMatrix<f64>> {
    let mut rng = rng_from(seed, &[stream::TUPLES, index as u64]);
    let n = ns.dim;
    ns.unit_factors
        .iter()
        .map(|c| c + DMatrix::<f64>::from_fn(n, n, |_, _| delta * rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

struct Reference {
    /// `b[j * n + i] = (C_j^T C_j)_{ii}`.
    b: Vec<f64>,
    /// Inverse variances for the density ratio, same layout.
    inv_var: Vec<f64>,
}

impl Reference {
    fn new(ns: &NormalizedSystem, cfg: &RewardConfig) -> Self {
        let n = ns.dim;
        let mut b = Vec::with_capacity(n * n);
        let mut inv_var = Vec::with_capacity(n * n);
        for c in &ns.unit_factors {
            for i in 0..n {
                b.push(reference_entry(c, i));
                inv_var.push(if cfg.variance_rescale { 1.0 / entry_variance(c, i, cfg.delta) } else { 1.0 });
            }
        }
        Reference { b, inv_var }
    }
}

/// Average of `|det D_x G| p(G(x))` over the prepared points for one tuple.
pub fn tuple_average(
    ns: &NormalizedSystem,
    cfg: &RewardConfig,
    points: &PreparedPoints,
    index: usize,
) -> Result<TupleAverage> {
    let reference = Reference::new(ns, cfg);
    tuple_average_with(ns, cfg, &reference, points, index)
}

fn tuple_average_with(
    ns: &NormalizedSystem,
    cfg: &RewardConfig,
    reference: &Reference,
    points: &PreparedPoints,
    index: usize,
) -> Result<TupleAverage> {
    let n = ns.dim;
    let tuple = draw_tuple(ns, cfg.delta, cfg.seed, index);
    // Row-major grams, q[j * n * n + r * n + s].
    let mut q = Vec::with_capacity(n * n * n);
    for a in &tuple {
        let g = a.transpose() * a;
        for r in 0..n {
            for s in 0..n {
                q.push(g[(r, s)]);
            }
        }
    }
    let c = &ns.weights;

    let mut jac = vec![0.0; n * n];
    let mut max = f64::NEG_INFINITY;
    let mut acc = 0.0;
    let mut used = 0;
    let mut nonfinite = 0;
    for p in &points.points {
        let x = p.x.as_slice();
        let i = p.pivot;
        let xi = x[i];
        let inv_xi2 = 1.0 / (xi * xi);
        let mut log_w = 0.0;
        for j in 0..n {
            let qj = &q[j * n * n..(j + 1) * n * n];
            let row = &mut jac[j * n..(j + 1) * n];
            let mut quad = 0.0;
            for r in 0..n {
                let qr = &qj[r * n..(r + 1) * n];
                let v: f64 = qr.iter().zip(x).map(|(a, b)| a * b).sum();
                row[r] = v;
                quad += v * x[r];
            }
            let resid = c[j] - quad;
            let aii = qj[i * n + i];
            let g = resid * inv_xi2 + aii;
            let b = reference.b[j * n + i];
            log_w += 0.5 * reference.inv_var[j * n + i] * ((aii - b).powi(2) - (g - b).powi(2));
            row[i] += resid / xi;
        }
        // |det(-2 x_i^{-2} R)| = (2 x_i^{-2})^n |det R|.
        let term = log_abs_det_in_place(&mut jac, n).map(|ld| ld + n as f64 * (2.0 * inv_xi2).ln() + log_w);
        match term {
            None => used += 1,
            Some(t) if t.is_finite() => {
                used += 1;
                if cfg.log_space {
                    if t > max {
                        acc = acc * (max - t).exp() + 1.0;
                        max = t;
                    } else {
                        acc += (t - max).exp();
                    }
                } else {
                    acc += t.exp();
                }
            }
            Some(t) if t == f64::NEG_INFINITY => used += 1,
            Some(_) => nonfinite += 1,
        }
    }

    if used == 0 {
        return Ok(TupleAverage { log_mean: f64::NAN, used, nonfinite });
    }
    let log_mean = if cfg.log_space {
        if acc == 0.0 {
            f64::NEG_INFINITY
        } else {
            max + acc.ln() - (used as f64).ln()
        }
    } else {
        if !acc.is_finite() {
            return Err(Error::Overflow);
        }
        acc / used as f64
    };
    Ok(TupleAverage { log_mean, used, nonfinite })
}

/// Runs the full estimator on a normalized system.
/// Logs each distinct message once per process; training loops re-estimate
/// with the same configuration thousands of times.
fn warn_once(message: String) {
    static SEEN: Mutex<BTreeSet<String>> = Mutex::new(BTreeSet::new());
    let mut seen = SEEN.lock().unwrap_or_else(|e| e.into_inner());
    if !seen.contains(&message) {
        warn!("{message}");
        seen.insert(message);
    }
}

pub fn estimate_reward(ns: &NormalizedSystem, cfg: &RewardConfig) -> Result<RewardEstimate> {
    let n = ns.dim;
    for w in cfg.validate(n)? {
        warn_once(w);
    }
    let points = prepare_points(n, cfg)?;
    if points.points.is_empty() {
        return Err(Error::EstimationFailed("every sample point was discarded".into()));
    }
    let reference = Reference::new(ns, cfg);
    let run = |t: usize| tuple_average_with(ns, cfg, &reference, &points, t);
    let tuples: Vec<TupleAverage> = if cfg.workers == 1 {
        (0..cfg.num_tuples).map(run).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Numerical(format!("thread pool: {e}")))?;
        pool.install(|| (0..cfg.num_tuples).into_par_iter().map(run).collect::<Result<_>>())?
    };

    let nonfinite = tuples.iter().map(|t| t.nonfinite).sum();
    let live: Vec<f64> = tuples.iter().filter(|t| t.used > 0).map(|t| t.log_mean).collect();
    if live.is_empty() {
        return Err(Error::EstimationFailed("every sample was discarded".into()));
    }
    let m = live.len() as f64;
    let (value, std_error, log_value) = if cfg.log_space {
        let shift = live.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if shift == f64::NEG_INFINITY {
            (0.0, 0.0, f64::NEG_INFINITY)
        } else {
            let scaled: Vec<f64> = live.iter().map(|l| (l - shift).exp()).collect();
            let (mean, sd) = mean_and_sd(&scaled);
            let log_value = shift + mean.ln();
            (log_value.exp(), shift.exp() * sd / m.sqrt(), log_value)
        }
    } else {
        let (mean, sd) = mean_and_sd(&live);
        (mean, sd / m.sqrt(), mean.ln())
    };
    if !value.is_finite() {
        return Err(Error::Overflow);
    }
    Ok(RewardEstimate {
        value,
        std_error,
        log_value,
        accepted_points: points.accepted,
        rejected_points: points.rejected,
        pivot_fallbacks: points.pivot_fallbacks,
        discarded_points: points.discarded,
        nonfinite_samples: nonfinite,
        epsilon: points.epsilon,
        degenerate: false,
        not_converged: false,
    })
}

fn mean_and_sd(v: &[f64]) -> (f64, f64) {
    let m = v.len() as f64;
    let mean = v.iter().sum::<f64>() / m;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, var.sqrt())
}

/// Normalizes `system` and estimates its reward. A degenerate normalization
/// gives a zero reward with the `degenerate` flag; a normalization that runs
/// out of iterations continues from its best iterate with `not_converged` set.
pub fn reward_pipeline(system: &QuadricSystem, cfg: &RewardConfig) -> Result<RewardEstimate> {
    let ns = match normalize(system, &ScalingOptions::default()) {
        Ok(ns) => Ok(ns),
        Err(Error::NoConvergence { best_t, .. }) => normalize_at(system, &best_t),
        Err(e) => Err(e),
    };
    match ns {
        Ok(ns) => {
            let mut est = estimate_reward(&ns, cfg)?;
            est.not_converged = !ns.diagnostics.converged;
            Ok(est)
        }
        Err(e) if e.is_degenerate() => Ok(RewardEstimate::degenerate()),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadric::QuadricSystem;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian_matrix(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |_, _| rng.sample(StandardNormal))
    }

    fn small_cfg(n: usize) -> RewardConfig {
        RewardConfig {
            delta: 0.5 / n as f64,
            num_points: 500,
            num_tuples: 20,
            seed: 5,
            ..Default::default()
        }
    }

    fn normalized(n: usize, seed: u64) -> NormalizedSystem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        normalize(&QuadricSystem::random_gaussian(n, 1.0, &mut rng), &ScalingOptions::default()).unwrap()
    }

    #[test]
    fn annulus_acceptance_is_high() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(annulus_acceptance(100, 0.4, 10_000, &mut rng) >= 0.97);
        let frac = annulus_acceptance(25, 0.8, 10_000, &mut rng);
        assert!(frac >= 1.0 - 2.0 * (-0.8f64 * 0.8 * 25.0 / 4.0).exp());
    }

    #[test]
    fn accepted_points_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = sample_annulus(64, 2000, 0.5, &mut rng).unwrap();
        let (lo, hi) = annulus_bounds(64, 0.5);
        assert_eq!(s.points.len(), 2000);
        assert!(s.points.iter().all(|x| x.norm() >= lo && x.norm() <= hi));
        assert!(sample_annulus(64, 10, 0.1, &mut rng).is_err());
    }

    #[test]
    fn empty_shell_is_an_anomaly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = sample_shell(4, 10, 100.0, 101.0, &mut rng).unwrap_err();
        assert!(matches!(err, Error::SamplingAnomaly { accepted: 0, draws: 100 }));
    }

    #[test]
    fn pivot_rule() {
        assert_eq!(select_pivot(&DVector::from_vec(vec![3.0, 1.0, 0.1])), (1, false));
        assert_eq!(select_pivot(&DVector::from_vec(vec![0.1, 0.2, 0.3])), (2, true));
        assert_eq!(select_pivot(&DVector::from_vec(vec![1.0, 1.0, 1.0])), (0, false));
        assert_eq!(select_pivot(&DVector::from_vec(vec![-2.0, 0.9, -1.5, 3.0])), (2, false));
    }

    #[test]
    fn conditioning_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.random_range(2..=8);
            let a = gaussian_matrix(n, &mut rng);
            let x = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let i = rng.random_range(0..n);
            if x[i].abs() < 0.1 {
                continue;
            }
            let c = rng.random_range(0.1..3.0);
            let g = condition_entry(&a, c, &x, i).unwrap();
            let mut q = a.transpose() * &a;
            q[(i, i)] = g;
            assert!((quad_form(&q, &x) - c).abs() <= 1e-10 * c.max(quad_form(&(a.transpose() * &a), &x)).max(1.0));
        }
    }

    #[test]
    fn identity_needs_no_conditioning() {
        let x = DVector::from_vec(vec![0.3, -1.2, 0.8]);
        for i in 0..3 {
            let g = condition_entry(&DMatrix::identity(3, 3), x.norm_squared(), &x, i).unwrap();
            assert!((g - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn conditioning_matches_scalar_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 5;
        let a = gaussian_matrix(n, &mut rng);
        let x = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal) + 0.5);
        let i = 2;
        let c = 1.7;
        // x^T Q(s) x is affine in the (i, i) entry s; solve it from two evaluations.
        let eval = |s: f64| {
            let mut q = a.transpose() * &a;
            q[(i, i)] = s;
            quad_form(&q, &x)
        };
        let (f0, f1) = (eval(0.0), eval(1.0));
        let s = (c - f0) / (f1 - f0);
        assert!((condition_entry(&a, c, &x, i).unwrap() - s).abs() < 1e-9 * s.abs().max(1.0));
        assert!(condition_entry(&a, c, &DVector::from_vec(vec![1.0, 1.0, 1e-9, 1.0, 1.0]), i).is_err());
    }

    #[test]
    fn importance_weight_cases() {
        // Already satisfied: g = a_ii, weight 1.
        let x = DVector::from_vec(vec![1.0, 0.5]);
        let a = vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 2.0];
        let c: Vec<f64> = a.iter().map(|m| (m * &x).norm_squared()).collect();
        let cf = vec![DMatrix::identity(2, 2) * 0.7, DMatrix::identity(2, 2) * 0.3];
        assert!(importance_weight(&a, &cf, &c, &x, 0).unwrap().abs() < 1e-14);

        // Single equation with a = 2, b = 1 and c = 0 so that g = 0:
        // ((2 - 1)^2 - (0 - 1)^2) / 2 = 0.
        let a1 = vec![DMatrix::from_element(1, 1, 2f64.sqrt())];
        let x1 = DVector::from_element(1, 1.0);
        assert!(condition_entry(&a1[0], 0.0, &x1, 0).unwrap().abs() < 1e-15);
        let w = importance_weight(&a1, &[DMatrix::from_element(1, 1, 1.0)], &[0.0], &x1, 0).unwrap();
        assert!(w.abs() < 1e-15);
    }

    #[test]
    fn importance_weight_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 4;
        let a: Vec<_> = (0..n).map(|_| gaussian_matrix(n, &mut rng)).collect();
        let cf: Vec<_> = (0..n).map(|_| gaussian_matrix(n, &mut rng)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
        let x = DVector::from_vec(vec![1.1, -0.7, 0.9, 1.4]);
        let w = importance_weight(&a, &cf, &c, &x, 0).unwrap();
        let perm = [2, 0, 3, 1];
        let pa: Vec<_> = perm.iter().map(|&k| a[k].clone()).collect();
        let pcf: Vec<_> = perm.iter().map(|&k| cf[k].clone()).collect();
        let pc: Vec<_> = perm.iter().map(|&k| c[k]).collect();
        assert!((importance_weight(&pa, &pcf, &pc, &x, 0).unwrap() - w).abs() < 1e-12 * w.abs().max(1.0));
    }

    fn g_map(a: &[DMatrix<f64>], c: &[f64], x: &DVector<f64>, i: usize) -> DVector<f64> {
        DVector::from_iterator(a.len(), a.iter().zip(c).map(|(m, cj)| condition_entry(m, *cj, x, i).unwrap()))
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let n = rng.random_range(2..=6);
            let a: Vec<_> = (0..n).map(|_| gaussian_matrix(n, &mut rng)).collect();
            let c: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
            let x = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let (i, _) = select_pivot(&x);
            if x[i].abs() < 0.3 {
                continue;
            }
            let jac = jacobian_dxg(&a, &c, &x, i).unwrap();
            let h = 1e-6;
            let mut fd = DMatrix::zeros(n, n);
            for k in 0..n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                fd.set_column(k, &((g_map(&a, &c, &xp, i) - g_map(&a, &c, &xm, i)) / (2.0 * h)));
            }
            assert!((&jac - &fd).amax() <= 1e-5 * fd.amax().max(1.0));
        }
    }

    #[test]
    fn jacobian_at_a_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 4;
        let a: Vec<_> = (0..n).map(|_| gaussian_matrix(n, &mut rng)).collect();
        let x = DVector::from_vec(vec![1.2, -0.8, 1.0, 0.9]);
        let c: Vec<f64> = a.iter().map(|m| (m * &x).norm_squared()).collect();
        let jac = jacobian_dxg(&a, &c, &x, 0).unwrap();
        for (j, aj) in a.iter().enumerate() {
            let expected = (aj.transpose() * (aj * &x)) * (-2.0 / (x[0] * x[0]));
            assert!((jac.row(j).transpose() - expected).amax() < 1e-12);
        }
    }

    #[test]
    fn jacobian_homogeneity() {
        // First bracket rows scale by t; the residual term r(tx) = c - t^2 x^T Q x.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 3;
        let a: Vec<_> = (0..n).map(|_| gaussian_matrix(n, &mut rng)).collect();
        let c = vec![1.0, 0.8, 1.3];
        let x = DVector::from_vec(vec![1.1, -0.9, 0.7]);
        let t = 1.7;
        let i = 0;
        let tx = &x * t;
        let jac_t = jacobian_dxg(&a, &c, &tx, i).unwrap();
        for j in 0..n {
            let q = a[j].transpose() * &a[j];
            let mut row = (&q * &x) * t;
            row[i] += (c[j] - t * t * quad_form(&q, &x)) / (t * x[i]);
            let expected = row * (-2.0 / (t * t * x[i] * x[i]));
            assert!((jac_t.row(j).transpose() - expected).amax() < 1e-12);
        }
    }

    #[test]
    fn tuple_kernel_matches_reference_functions() {
        let ns = normalized(4, 11);
        let cfg = RewardConfig { num_points: 50, num_tuples: 1, ..small_cfg(4) };
        let pts = prepare_points(4, &cfg).unwrap();
        let tuple = draw_tuple(&ns, cfg.delta, cfg.seed, 0);
        let mut sum = 0.0;
        for p in &pts.points {
            let jac = jacobian_dxg(&tuple, &ns.weights, &p.x, p.pivot).unwrap();
            let w = importance_weight(&tuple, &ns.unit_factors, &ns.weights, &p.x, p.pivot).unwrap();
            sum += jac.determinant().abs() * w.exp();
        }
        let expected = sum / pts.points.len() as f64;
        let got = tuple_average(&ns, &cfg, &pts, 0).unwrap().log_mean.exp();
        assert!((got - expected).abs() <= 1e-9 * expected);
    }

    #[test]
    fn single_tuple_equals_inner_average() {
        let ns = normalized(4, 12);
        let cfg = RewardConfig { num_tuples: 1, ..small_cfg(4) };
        let est = estimate_reward(&ns, &cfg).unwrap();
        let pts = prepare_points(4, &cfg).unwrap();
        let inner = tuple_average(&ns, &cfg, &pts, 0).unwrap();
        assert_eq!(est.value, inner.log_mean.exp());
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn linear_and_log_accumulation_agree() {
        let ns = normalized(3, 13);
        let cfg = small_cfg(3);
        let a = estimate_reward(&ns, &cfg).unwrap();
        let b = estimate_reward(&ns, &RewardConfig { log_space: false, ..cfg }).unwrap();
        assert!((a.value - b.value).abs() <= 1e-10 * a.value);
        assert!((a.std_error - b.std_error).abs() <= 1e-8 * a.std_error.max(1e-300));
    }

    #[test]
    fn deterministic_and_worker_independent() {
        let ns = normalized(5, 14);
        let cfg = small_cfg(5);
        let a = estimate_reward(&ns, &cfg).unwrap();
        let b = estimate_reward(&ns, &cfg).unwrap();
        let c = estimate_reward(&ns, &RewardConfig { workers: 3, ..cfg.clone() }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.accepted_points, cfg.num_points);
        assert!(a.value >= 0.0 && a.std_error >= 0.0);
    }

    #[test]
    fn config_validation() {
        let cfg = RewardConfig::default();
        assert!(cfg.validate(10).is_ok());
        assert!(RewardConfig { delta: 0.2, ..cfg.clone() }.validate(10).is_err());
        assert!(RewardConfig { epsilon: Some(0.1), ..cfg.clone() }.validate(10).is_err());
        assert!(RewardConfig { num_points: 0, ..cfg.clone() }.validate(10).is_err());
        let warnings = RewardConfig { num_points: 100, num_tuples: 10, ..cfg }.validate(10).unwrap();
        assert_eq!(warnings.len(), 2);
        assert_eq!(RewardConfig::auto_epsilon(10_000), 0.1);
    }

    #[test]
    fn gauge_invariant_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let sys = QuadricSystem::random_gaussian(4, 1.0, &mut rng);
        let cfg = small_cfg(4);
        let a = reward_pipeline(&sys, &cfg).unwrap();
        let b = reward_pipeline(&sys, &cfg).unwrap();
        assert_eq!(a, b);
        let scaled = reward_pipeline(&sys.jointly_scaled(2.5).unwrap(), &cfg).unwrap();
        assert!((a.value - scaled.value).abs() <= 1e-6 * a.value);
    }

    #[test]
    fn degenerate_system_gives_zero_reward() {
        let mut f = DMatrix::zeros(2, 2);
        f[(0, 0)] = 1.0;
        let sys = QuadricSystem::with_unit_rhs(vec![f.clone(), f]).unwrap();
        let est = reward_pipeline(&sys, &small_cfg(2)).unwrap();
        assert!(est.degenerate);
        assert_eq!(est.value, 0.0);
        let json = serde_json::to_string(&est).unwrap();
        assert!(json.contains("\"log_value\":null"));
        let back: RewardEstimate = serde_json::from_str(&json).unwrap();
        assert_eq!(back, est);
    }

    #[test]
    fn power_flow_path_has_positive_reward() {
        use crate::power_flow::{combine_to_definite, build_raw_forms, Coefficients, PowerNetwork};
        let net = PowerNetwork::path(&[1.5, 0.7], vec![0.3, -0.2]).unwrap();
        let raw = build_raw_forms(&net);
        let coef = Coefficients {
            alphas: DMatrix::from_fn(3, 3, |i, j| 1.0 + 0.1 * (i + j) as f64 + 0.5 * (i == j) as u8 as f64),
            betas: DMatrix::from_fn(3, 3, |i, j| 1.0 + 0.2 * (i * j) as f64),
            gammas: DMatrix::from_fn(3, 3, |i, j| 0.1 + 0.05 * (i == j) as u8 as f64),
        };
        let sys = combine_to_definite(&raw, &coef).unwrap();
        let cfg = RewardConfig { delta: 0.1, num_points: 2000, num_tuples: 40, seed: 3, ..Default::default() };
        let est = reward_pipeline(&sys, &cfg).unwrap();
        assert!(est.value.is_finite() && est.value > 0.0, "{est:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn conditioning_residual_vanishes(seed in any::<u64>(), n in 2usize..7, c in 0.1f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = gaussian_matrix(n, &mut rng);
            let x = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let (i, _) = select_pivot(&x);
            prop_assume!(x[i].abs() >= 0.5);
            let g = condition_entry(&a, c, &x, i).unwrap();
            let mut q = a.transpose() * &a;
            let scale = quad_form(&q, &x).abs().max(c);
            q[(i, i)] = g;
            prop_assert!((quad_form(&q, &x) - c).abs() <= 1e-10 * scale.max(1.0));
        }

        #[test]
        fn pivot_lies_in_qualifying_set(v in proptest::collection::vec(-3.0f64..3.0, 1..12)) {
            let x = DVector::from_vec(v);
            let (i, fallback) = select_pivot(&x);
            if fallback {
                prop_assert!(x.iter().all(|t| t * t < 0.5));
                prop_assert!(x.iter().all(|t| t.abs() <= x[i].abs()));
            } else {
                prop_assert!(x[i] * x[i] >= 0.5);
            }
        }
    }
}
