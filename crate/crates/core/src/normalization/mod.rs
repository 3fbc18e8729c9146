//! Simultaneous scaling of quadratic forms to unit trace summing to identity.
//!
//! For grams `Q_i = A_i^T A_i` the minimizer `t*` of
//! `ln det(sum_i e^{t_i} Q_i)` over `sum_i t_i = 0` yields `Z = S*^{-1/2}` such
//! that `T_i = e^{t_i*} Z^T Q_i Z` have unit trace and sum to the identity.
//! The normalized system is then
//!
//! ```text
//! C_i = A_i Z / ||A_i Z||_F,   g^2 = sum_i r_i / ||A_i Z||_F^2,
//! c_i = n r_i / (g^2 ||A_i Z||_F^2),   ||C_i y||^2 = c_i,
//! ```
//!
//! whose solutions map to the original ones by `x = (g / sqrt(n)) Z y`.

mod bfgs;
mod objective;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{from_row_major, inverse_sqrt_spd, to_row_major};
use crate::quadric::{GramSystem, QuadricSystem};

pub use bfgs::{minimize, BfgsOptions, BfgsOutcome};
pub use objective::{full_log_weights, full_weights, scaled_sum, scaling_hessian, scaling_objective};

use objective::{hessian_at, ScalingPoint};

/// Relative eigenvalue floor for `S^{-1/2}`.
pub const EIGEN_FLOOR: f64 = 1e-14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingOptions {
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
    pub corrector_steps: usize,
    /// Starting point in the reduced `n - 1` coordinates; zero when absent.
    pub initial_t: Option<Vec<f64>>,
}

impl Default for ScalingOptions {
    fn default() -> Self {
        ScalingOptions {
            gradient_tolerance: 1e-10,
            max_iterations: 500,
            corrector_steps: 0,
            initial_t: None,
        }
    }
}

impl ScalingOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.gradient_tolerance > 0.0) {
            return Err(Error::Invalid("gradient_tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectorReport {
    pub steps_requested: usize,
    pub steps_taken: usize,
    pub failed: bool,
    pub value_before: f64,
    pub value_after: f64,
    pub trace_distance_before: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingDiagnostics {
    pub trace_distance: f64,
    pub summation_distance: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    /// Wall-clock seconds spent in `normalize`. Not part of the reproducible payload.
    pub wall_time: f64,
    pub corrector: Option<CorrectorReport>,
}

/// Unit-Frobenius factors `C_i`, weights `c` summing to `n`, basis `Z` and scale `g`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NormalizedWire", into = "NormalizedWire")]
pub struct NormalizedSystem {
    pub dim: usize,
    pub unit_factors: Vec<DMatrix<f64>>,
    pub weights: Vec<f64>,
    pub basis: DMatrix<f64>,
    pub scale: f64,
    /// Full optimal log-weights `t*` (length `n`, summing to zero).
    pub log_weights: Vec<f64>,
    pub diagnostics: ScalingDiagnostics,
}

#[derive(Serialize, Deserialize)]
struct NormalizedWire {
    dim: usize,
    unit_factors: Vec<Vec<f64>>,
    weights: Vec<f64>,
    basis: Vec<f64>,
    scale: f64,
    log_weights: Vec<f64>,
    diagnostics: ScalingDiagnostics,
}

impl TryFrom<NormalizedWire> for NormalizedSystem {
    type Error = Error;

    fn try_from(w: NormalizedWire) -> Result<Self> {
        let n = w.dim;
        if w.unit_factors.len() != n || w.weights.len() != n || w.log_weights.len() != n {
            return Err(Error::Dimension("normalized system fields disagree with dim".into()));
        }
        Ok(NormalizedSystem {
            dim: n,
            unit_factors: w
                .unit_factors
                .iter()
                .map(|f| from_row_major(n, n, f))
                .collect::<Result<_>>()?,
            weights: w.weights,
            basis: from_row_major(n, n, &w.basis)?,
            scale: w.scale,
            log_weights: w.log_weights,
            diagnostics: w.diagnostics,
        })
    }
}

impl From<NormalizedSystem> for NormalizedWire {
    fn from(s: NormalizedSystem) -> Self {
        NormalizedWire {
            dim: s.dim,
            unit_factors: s.unit_factors.iter().map(to_row_major).collect(),
            weights: s.weights,
            basis: to_row_major(&s.basis),
            scale: s.scale,
            log_weights: s.log_weights,
            diagnostics: s.diagnostics,
        }
    }
}

impl NormalizedSystem {
    /// The system `||C_i y||^2 = c_i`.
    pub fn as_system(&self) -> Result<QuadricSystem> {
        QuadricSystem::new(self.unit_factors.clone(), self.weights.clone())
    }

    /// Maps a solution `y` of the normalized system to the original variables.
    pub fn to_original(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.basis * y * (self.scale / (self.dim as f64).sqrt())
    }

    /// Recomputes `||sum_i C_i^T C_i - I||_F`.
    pub fn summation_distance(&self) -> f64 {
        let n = self.dim;
        let mut sum = -DMatrix::<f64>::identity(n, n);
        for c in &self.unit_factors {
            sum += c.transpose() * c;
        }
        sum.norm()
    }
}

struct Assembled {
    unit_factors: Vec<DMatrix<f64>>,
    weights: Vec<f64>,
    basis: DMatrix<f64>,
    scale: f64,
    trace_distance: f64,
    summation_distance: f64,
}

/// Builds `(C, c, Z, g)` and the accuracy diagnostics from reduced log-weights.
fn assemble(system: &QuadricSystem, grams: &GramSystem, t: &DVector<f64>) -> Result<Assembled> {
    let n = system.dim();
    let w = full_weights(t);
    let s = scaled_sum(grams, &w);
    let z = inverse_sqrt_spd(&s, EIGEN_FLOOR)?;

    let az: Vec<DMatrix<f64>> = system.factors().iter().map(|a| a * &z).collect();
    let fro_sq: Vec<f64> = az.iter().map(|m| m.norm_squared()).collect();
    if fro_sq.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(Error::Degenerate("a transformed factor vanished".into()));
    }
    let unit_factors: Vec<DMatrix<f64>> = az.iter().zip(&fro_sq).map(|(m, f)| m / f.sqrt()).collect();

    let g_sq: f64 = system.rhs().iter().zip(&fro_sq).map(|(r, f)| r / f).sum();
    let weights = system
        .rhs()
        .iter()
        .zip(&fro_sq)
        .map(|(r, f)| n as f64 * r / (g_sq * f))
        .collect();

    // Tr(T_i) = alpha_i ||A_i Z||_F^2 with alpha_i = kappa e^{t_i}; kappa fixes the
    // gauge so that sum_i Tr(T_i) = n, i.e. sum_i T_i = I.
    let raw: Vec<f64> = w.iter().zip(&fro_sq).map(|(wi, f)| wi * f).collect();
    let kappa = n as f64 / raw.iter().sum::<f64>();
    let trace_distance = raw.iter().map(|v| (kappa * v - 1.0).powi(2)).sum::<f64>().sqrt();

    let mut sum = -DMatrix::<f64>::identity(n, n);
    for c in &unit_factors {
        sum += c.transpose() * c;
    }

    Ok(Assembled {
        unit_factors,
        weights,
        basis: z,
        scale: g_sq.sqrt(),
        trace_distance,
        summation_distance: sum.norm(),
    })
}

/// Outcome of the damped Newton corrector.
#[derive(Clone, Debug)]
pub struct CorrectorOutcome {
    pub t: DVector<f64>,
    pub steps_taken: usize,
    pub failed: bool,
    pub value_before: f64,
    pub value_after: f64,
}

/// Runs up to `steps` damped Newton steps from `t`. Returns the improved point
/// when the objective decreased and `S` stayed positive definite, otherwise the
/// input with `failed` set.
pub fn newton_corrector(t: &DVector<f64>, grams: &GramSystem, steps: usize) -> Result<CorrectorOutcome> {
    let start = ScalingPoint::new(t, grams)?;
    let value_before = start.value;
    let unchanged = |failed| CorrectorOutcome {
        t: t.clone(),
        steps_taken: 0,
        failed,
        value_before,
        value_after: value_before,
    };
    if steps == 0 {
        return Ok(unchanged(false));
    }

    let mut current = t.clone();
    let mut point = start;
    let mut taken = 0;
    for _ in 0..steps {
        let grad = point.gradient();
        let hess = hessian_at(&point, grams);
        let Some(chol) = hess.cholesky() else { break };
        let dir = -chol.solve(&grad);
        let mut alpha = 1.0;
        let mut next = None;
        for _ in 0..30 {
            let trial = &current + &dir * alpha;
            if let Ok(p) = ScalingPoint::new(&trial, grams) {
                if p.value < point.value {
                    next = Some((trial, p));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((trial, p)) = next else { break };
        current = trial;
        point = p;
        taken += 1;
    }

    if taken == 0 || !(point.value < value_before) {
        return Ok(unchanged(true));
    }
    Ok(CorrectorOutcome {
        t: current,
        steps_taken: taken,
        failed: false,
        value_before,
        value_after: point.value,
    })
}

fn reduced_start(n: usize, opts: &ScalingOptions) -> Result<DVector<f64>> {
    match &opts.initial_t {
        None => Ok(DVector::zeros(n - 1)),
        Some(t) if t.len() == n - 1 => Ok(DVector::from_column_slice(t)),
        Some(t) => Err(Error::Dimension(format!("initial_t has length {}, expected {}", t.len(), n - 1))),
    }
}

/// Normalizes `system` by quasi-Newton minimization of the scaling objective.
///
/// Fails with [`Error::Degenerate`] when the objective is undefined at the
/// start or `S*` is numerically singular, and with [`Error::NoConvergence`]
/// (carrying the best iterate) when the gradient tolerance is not reached.
pub fn normalize(system: &QuadricSystem, opts: &ScalingOptions) -> Result<NormalizedSystem> {
    opts.validate()?;
    let started = Instant::now();
    let n = system.dim();
    let grams = system.gram();
    let t0 = reduced_start(n, opts)?;

    let bfgs_opts = BfgsOptions {
        gradient_tolerance: opts.gradient_tolerance,
        max_iterations: opts.max_iterations,
        ..Default::default()
    };
    let out = minimize(|t| scaling_objective(t, &grams), t0, &bfgs_opts)?;
    if !out.converged {
        return Err(Error::NoConvergence {
            iterations: out.iterations,
            gradient_norm: out.gradient_norm(),
            best_t: out.x.iter().cloned().collect(),
        });
    }

    let mut t = out.x.clone();
    let mut gradient_norm = out.gradient_norm();
    let mut corrector = None;
    if opts.corrector_steps > 0 {
        let before = assemble(system, &grams, &t)?;
        let c = newton_corrector(&t, &grams, opts.corrector_steps)?;
        if !c.failed {
            t = c.t.clone();
            gradient_norm = scaling_objective(&t, &grams)?.1.amax();
        }
        corrector = Some(CorrectorReport {
            steps_requested: opts.corrector_steps,
            steps_taken: c.steps_taken,
            failed: c.failed,
            value_before: c.value_before,
            value_after: c.value_after,
            trace_distance_before: before.trace_distance,
        });
    }

    let parts = assemble(system, &grams, &t)?;
    Ok(NormalizedSystem {
        dim: n,
        unit_factors: parts.unit_factors,
        weights: parts.weights,
        basis: parts.basis,
        scale: parts.scale,
        log_weights: full_log_weights(&t),
        diagnostics: ScalingDiagnostics {
            trace_distance: parts.trace_distance,
            summation_distance: parts.summation_distance,
            iterations: out.iterations,
            gradient_norm,
            converged: true,
            wall_time: started.elapsed().as_secs_f64(),
            corrector,
        },
    })
}

/// Builds the normalized system at given reduced log-weights without optimizing,
/// e.g. from the best iterate of a run that did not converge.
pub fn normalize_at(system: &QuadricSystem, t: &[f64]) -> Result<NormalizedSystem> {
    let started = Instant::now();
    let n = system.dim();
    if t.len() + 1 != n {
        return Err(Error::Dimension(format!("t has length {}, expected {}", t.len(), n - 1)));
    }
    let grams = system.gram();
    let t = DVector::from_column_slice(t);
    let gradient_norm = scaling_objective(&t, &grams)?.1.amax();
    let parts = assemble(system, &grams, &t)?;
    Ok(NormalizedSystem {
        dim: n,
        unit_factors: parts.unit_factors,
        weights: parts.weights,
        basis: parts.basis,
        scale: parts.scale,
        log_weights: full_log_weights(&t),
        diagnostics: ScalingDiagnostics {
            trace_distance: parts.trace_distance,
            summation_distance: parts.summation_distance,
            iterations: 0,
            gradient_norm,
            converged: false,
            wall_time: started.elapsed().as_secs_f64(),
            corrector: None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadric::GramTolerance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn check_identities(ns: &NormalizedSystem, sum_tol: f64) {
        for c in &ns.unit_factors {
            assert!((c.norm() - 1.0).abs() <= 1e-8);
        }
        assert!((ns.weights.iter().sum::<f64>() - ns.dim as f64).abs() <= 1e-8);
        assert!(ns.diagnostics.summation_distance <= sum_tol, "{}", ns.diagnostics.summation_distance);
        assert!((ns.summation_distance() - ns.diagnostics.summation_distance).abs() < 1e-15);
        assert!(ns.weights.iter().all(|c| *c > 0.0));
    }

    #[test]
    fn identity_system() {
        let sys = QuadricSystem::with_unit_rhs(vec![DMatrix::identity(3, 3); 3]).unwrap();
        let ns = normalize(&sys, &ScalingOptions::default()).unwrap();
        assert!((&ns.basis - DMatrix::identity(3, 3) / 3f64.sqrt()).amax() < 1e-14);
        assert!(ns.weights.iter().all(|c| (c - 1.0).abs() < 1e-14));
        assert!(ns.diagnostics.trace_distance <= 1e-12);
        assert!(ns.diagnostics.summation_distance <= 1e-12);
    }

    #[test]
    fn diagonal_two_by_two() {
        // By symmetry t* = 0, S = diag(5, 5), Z = I / sqrt(5) and
        // C_1^T C_1 + C_2^T C_2 = (diag(4,1) + diag(1,4)) / 5 = I.
        let sys = QuadricSystem::with_unit_rhs(vec![
            DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0])),
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0])),
        ])
        .unwrap();
        let ns = normalize(&sys, &ScalingOptions::default()).unwrap();
        assert!(ns.log_weights.iter().all(|t| t.abs() < 1e-12));
        assert!((&ns.basis - DMatrix::identity(2, 2) / 5f64.sqrt()).amax() < 1e-14);
        check_identities(&ns, 1e-10);
    }

    #[test]
    fn random_gaussian_systems_satisfy_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for n in [2, 3, 5, 10, 20, 50] {
            let sys = QuadricSystem::random_gaussian(n, 1.0, &mut rng);
            let ns = normalize(&sys, &ScalingOptions::default()).unwrap();
            check_identities(&ns, 1e-8);
            assert!(ns.diagnostics.trace_distance < 1e-8);
        }
    }

    #[test]
    fn json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let ns = normalize(&QuadricSystem::random_gaussian(4, 1.0, &mut rng), &ScalingOptions::default()).unwrap();
        let back: NormalizedSystem = serde_json::from_str(&serde_json::to_string(&ns).unwrap()).unwrap();
        assert_eq!(ns, back);
    }

    #[test]
    fn solutions_map_back_through_the_basis() {
        // ||diag(1,2) x||^2 = 1, ||diag(2,1) x||^2 = 1 has x = (+-1, +-1)/sqrt(5).
        let sys = QuadricSystem::with_unit_rhs(vec![
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0])),
            DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0])),
        ])
        .unwrap();
        let ns = normalize(&sys, &ScalingOptions::default()).unwrap();
        let x = DVector::from_vec(vec![1.0, -1.0]) / 5f64.sqrt();
        // Invert x = (g / sqrt(n)) Z y.
        let zi = ns.basis.clone().try_inverse().unwrap();
        let y = zi * &x * ((ns.dim as f64).sqrt() / ns.scale);
        let resid = ns.as_system().unwrap().evaluate(&y).unwrap();
        assert!(resid.amax() < 1e-12);
        assert!((ns.to_original(&y) - x).amax() < 1e-14);
    }

    #[test]
    fn gauge_invariance_under_joint_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let sys = QuadricSystem::random_gaussian(5, 1.0, &mut rng);
        let a = normalize(&sys, &ScalingOptions::default()).unwrap();
        let b = normalize(&sys.jointly_scaled(3.0).unwrap(), &ScalingOptions::default()).unwrap();
        for (ca, cb) in a.unit_factors.iter().zip(&b.unit_factors) {
            assert!((ca - cb).amax() < 1e-9);
        }
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_grams_error() {
        let mut f = DMatrix::zeros(2, 2);
        f[(0, 0)] = 1.0;
        let sys = QuadricSystem::with_unit_rhs(vec![f.clone(), f]).unwrap();
        assert!(normalize(&sys, &ScalingOptions::default()).unwrap_err().is_degenerate());
    }

    #[test]
    fn iteration_budget_exhaustion_carries_best_iterate() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let sys = QuadricSystem::random_gaussian(6, 1.0, &mut rng);
        let opts = ScalingOptions { max_iterations: 1, ..Default::default() };
        match normalize(&sys, &opts) {
            Err(Error::NoConvergence { best_t, .. }) => {
                assert_eq!(best_t.len(), 5);
                let ns = normalize_at(&sys, &best_t).unwrap();
                assert!(!ns.diagnostics.converged);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn corrector_with_zero_steps_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let grams = QuadricSystem::random_gaussian(4, 1.0, &mut rng).gram();
        let t = DVector::from_vec(vec![0.1, -0.2, 0.05]);
        let out = newton_corrector(&t, &grams, 0).unwrap();
        assert_eq!(out.t, t);
        assert!(!out.failed);
        assert_eq!(out.steps_taken, 0);
    }

    #[test]
    fn corrector_converges_quadratically() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let sys = QuadricSystem::random_gaussian(5, 1.0, &mut rng);
        let grams = sys.gram();
        let loose = minimize(
            |t| scaling_objective(t, &grams),
            DVector::zeros(4),
            &BfgsOptions { gradient_tolerance: 1e-2, ..Default::default() },
        )
        .unwrap();
        let before = assemble(&sys, &grams, &loose.x).unwrap().trace_distance;
        let out = newton_corrector(&loose.x, &grams, 2).unwrap();
        assert!(!out.failed);
        let after = assemble(&sys, &grams, &out.t).unwrap().trace_distance;
        assert!(before > 1e-4, "start is not loose enough: {before:e}");
        assert!(after <= 10.0 * before * before, "before {before:e} after {after:e}");
    }

    #[test]
    fn corrector_from_optimum_improves_or_flags() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..5 {
            let sys = QuadricSystem::random_gaussian(8, 1.0, &mut rng);
            let ns = normalize(&sys, &ScalingOptions { corrector_steps: 5, ..Default::default() }).unwrap();
            let rep = ns.diagnostics.corrector.clone().unwrap();
            assert!(rep.failed || rep.value_after < rep.value_before);
        }
    }

    #[test]
    fn explicit_grams_accept_semidefinite_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let sys = QuadricSystem::random_gaussian(3, 1.0, &mut rng);
        let grams = GramSystem::from_grams(sys.gram().grams().to_vec(), GramTolerance::default()).unwrap();
        let t = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        assert!(scaling_objective(&t, &grams).is_ok());
    }
}
