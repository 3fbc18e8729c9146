//! Real-solution counting for small systems by multi-start damped Newton.
//!
//! Counts are exact only when corroborated (`exhaustive`); above dimension 3
//! they are heuristic lower bounds.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadric::QuadricSystem;
use crate::seeding::{rng_from, stream};

/// Start radii as multiples of the typical solution norm.
const RADII: [f64; 4] = [0.5, 0.75, 1.0, 1.25];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleOptions {
    /// Number of starts; `None` means `200 * 2^n` capped at `max_starts`.
    pub starts: Option<usize>,
    pub max_starts: usize,
    pub seed: u64,
    pub max_dim: usize,
    pub dedup_tol: f64,
    pub residual_tol: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
    pub workers: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            starts: None,
            max_starts: 200_000,
            seed: 0,
            max_dim: 10,
            dedup_tol: 1e-6,
            residual_tol: 1e-9,
            max_iterations: 100,
            max_halvings: 30,
            workers: 1,
        }
    }
}

impl OracleOptions {
    pub fn start_count(&self, n: usize) -> usize {
        self.starts.unwrap_or_else(|| {
            let bezout = 1usize.checked_shl(n as u32).unwrap_or(usize::MAX);
            bezout.saturating_mul(200).min(self.max_starts)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RootCountResult {
    pub count: usize,
    /// Every distinct solution; negations are listed alongside.
    pub solutions: Vec<Vec<f64>>,
    pub starts_used: usize,
    pub converged: usize,
    pub dedup_tol: f64,
    pub residual_tol: f64,
    pub exhaustive: bool,
}

/// True iff every residual of `system` at `x` is at most `tol` in magnitude.
pub fn verify_solution(system: &QuadricSystem, x: &DVector<f64>, tol: f64) -> bool {
    system.evaluate(x).map(|r| r.amax() <= tol).unwrap_or(false)
}

/// Norm at which a random direction satisfies the equations on average:
/// `rho^2 = n sum_i r_i / sum_i ||A_i||_F^2`. Equals `sqrt(n)` for a normalized system.
pub fn typical_radius(system: &QuadricSystem) -> f64 {
    let n = system.dim() as f64;
    let fro: f64 = system.factors().iter().map(|a| a.norm_squared()).sum();
    let rhs: f64 = system.rhs().iter().sum();
    (n * rhs / fro).sqrt()
}

/// Damped Newton from `x0`. Returns the converged point or `None`.
pub fn newton_solve(system: &QuadricSystem, x0: DVector<f64>, opts: &OracleOptions) -> Option<DVector<f64>> {
    let mut x = x0;
    let mut f = system.evaluate(&x).ok()?;
    let mut fnorm = f.norm();
    for _ in 0..opts.max_iterations {
        if f.amax() <= opts.residual_tol {
            return Some(polish(system, x, f, opts));
        }
        let jac = system.quadric_gradients(&x).ok()?;
        let step = jac.lu().solve(&(-&f))?;
        if !step.iter().all(|v| v.is_finite()) {
            return None;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial = &x + &step * alpha;
            if let Ok(ft) = system.evaluate(&trial) {
                let n = ft.norm();
                if n < fnorm {
                    accepted = Some((trial, ft, n));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let (xn, fn_, nn) = accepted?;
        x = xn;
        f = fn_;
        fnorm = nn;
    }
    (f.amax() <= opts.residual_tol).then(|| polish(system, x, f, opts))
}

/// One extra full Newton step, kept only if it lowers the residual.
fn polish(system: &QuadricSystem, x: DVector<f64>, f: DVector<f64>, opts: &OracleOptions) -> DVector<f64> {
    let Ok(jac) = system.quadric_gradients(&x) else { return x };
    let Some(step) = jac.lu().solve(&(-&f)) else { return x };
    let y = &x + step;
    match system.evaluate(&y) {
        Ok(fy) if fy.amax() < f.amax() && fy.amax() <= opts.residual_tol => y,
        _ => x,
    }
}

fn generate_starts(n: usize, count: usize, radius: f64, seed: u64, pass: u64) -> Vec<DVector<f64>> {
    let mut rng = rng_from(seed, &[stream::ORACLE, pass]);
    (0..count)
        .map(|k| {
            let mut d = DVector::<f64>::from_fn(n, |_, _| rng.sample(StandardNormal));
            let norm = d.norm();
            if norm > 0.0 {
                d /= norm;
            }
            d * (radius * RADII[k % RADII.len()])
        })
        .collect()
}

fn run_starts(system: &QuadricSystem, starts: Vec<DVector<f64>>, opts: &OracleOptions) -> Result<Vec<Option<DVector<f64>>>> {
    let solve = |x0: DVector<f64>| newton_solve(system, x0, opts);
    if opts.workers <= 1 {
        return Ok(starts.into_iter().map(solve).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::Numerical(format!("thread pool: {e}")))?;
    Ok(pool.install(|| starts.into_par_iter().map(solve).collect()))
}

/// Distinct solutions compared on the `sqrt(n)` shell.
struct SolutionSet {
    shell: f64,
    tol: f64,
    points: Vec<DVector<f64>>,
    keys: Vec<DVector<f64>>,
}

impl SolutionSet {
    fn new(n: usize, tol: f64) -> Self {
        SolutionSet { shell: (n as f64).sqrt(), tol, points: Vec::new(), keys: Vec::new() }
    }

    fn key(&self, x: &DVector<f64>) -> DVector<f64> {
        x * (self.shell / x.norm())
    }

    /// Inserts `x` and `-x`; returns how many were new.
    fn insert_pair(&mut self, x: &DVector<f64>) -> usize {
        let mut added = 0;
        for p in [x.clone(), -x] {
            let k = self.key(&p);
            if self.keys.iter().all(|q| (q - &k).norm() > self.tol) {
                self.keys.push(k);
                self.points.push(p);
                added += 1;
            }
        }
        added
    }
}

/// Counts the real solutions of `system` by multi-start damped Newton.
pub fn count_real_solutions(system: &QuadricSystem, opts: &OracleOptions) -> Result<RootCountResult> {
    let n = system.dim();
    if n > opts.max_dim {
        return Err(Error::Refused { dim: n, max: opts.max_dim });
    }
    if !(opts.dedup_tol > 0.0 && opts.residual_tol > 0.0) {
        return Err(Error::Invalid("tolerances must be positive".into()));
    }
    let radius = typical_radius(system);
    let count = opts.start_count(n);
    let mut set = SolutionSet::new(n, opts.dedup_tol);
    let mut converged = 0;
    for x in run_starts(system, generate_starts(n, count, radius, opts.seed, 0), opts)?.into_iter().flatten() {
        if verify_solution(system, &x, opts.residual_tol) && x.norm() > 0.0 {
            converged += 1;
            set.insert_pair(&x);
        }
    }
    let mut starts_used = count;

    let mut exhaustive = false;
    if n <= 3 {
        let second = run_starts(system, generate_starts(n, 4 * count, radius, opts.seed, 1), opts)?;
        starts_used += 4 * count;
        let mut new = 0;
        for x in second.into_iter().flatten() {
            if verify_solution(system, &x, opts.residual_tol) && x.norm() > 0.0 {
                converged += 1;
                new += set.insert_pair(&x);
            }
        }
        exhaustive = new == 0 && set.points.len() <= 1 << n;
    }

    Ok(RootCountResult {
        count: set.points.len(),
        solutions: set.points.iter().map(|p| p.iter().cloned().collect()).collect(),
        starts_used,
        converged,
        dedup_tol: opts.dedup_tol,
        residual_tol: opts.residual_tol,
        exhaustive,
    })
}

/// Residual of a candidate as a matrix-free helper for callers holding raw vectors.
pub fn max_residual(system: &QuadricSystem, x: &[f64]) -> Result<f64> {
    Ok(system.evaluate(&DVector::from_column_slice(x))?.amax())
}
