//! Systems of quadratic equations `||A_i x||^2 = r_i`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{from_row_major, symmetrize, to_row_major};

/// `n` square factor matrices of side `n` with strictly positive right-hand sides.
///
/// Factors are stored rather than grams; grams are derived on demand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SystemWire", into = "SystemWire")]
pub struct QuadricSystem {
    dim: usize,
    factors: Vec<DMatrix<f64>>,
    rhs: Vec<f64>,
}

/// JSON layout: `{"dim": n, "factors": [[row-major n*n], ...], "rhs": [...]}`.
#[derive(Serialize, Deserialize)]
struct SystemWire {
    dim: usize,
    factors: Vec<Vec<f64>>,
    rhs: Vec<f64>,
}

impl TryFrom<SystemWire> for QuadricSystem {
    type Error = Error;

    fn try_from(w: SystemWire) -> Result<Self> {
        let factors = w
            .factors
            .iter()
            .map(|f| from_row_major(w.dim, w.dim, f))
            .collect::<Result<Vec<_>>>()?;
        let sys = QuadricSystem::new(factors, w.rhs)?;
        if sys.dim != w.dim {
            return Err(Error::Dimension(format!("dim {} does not match factor count", w.dim)));
        }
        Ok(sys)
    }
}

impl From<QuadricSystem> for SystemWire {
    fn from(s: QuadricSystem) -> Self {
        SystemWire {
            dim: s.dim,
            factors: s.factors.iter().map(to_row_major).collect(),
            rhs: s.rhs,
        }
    }
}

impl QuadricSystem {
    pub fn new(factors: Vec<DMatrix<f64>>, rhs: Vec<f64>) -> Result<Self> {
        let dim = factors.len();
        if dim == 0 {
            return Err(Error::Invalid("a system needs at least one equation".into()));
        }
        if rhs.len() != dim {
            return Err(Error::Dimension(format!("{} factors but {} right-hand sides", dim, rhs.len())));
        }
        for (i, f) in factors.iter().enumerate() {
            if f.nrows() != dim || f.ncols() != dim {
                return Err(Error::Dimension(format!(
                    "factor {i} is {}x{}, expected {dim}x{dim}",
                    f.nrows(),
                    f.ncols()
                )));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("factor {i} has a non-finite entry")));
            }
        }
        if let Some(i) = rhs.iter().position(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Invalid(format!("rhs[{i}] = {} must be finite and positive", rhs[i])));
        }
        Ok(QuadricSystem { dim, factors, rhs })
    }

    pub fn with_unit_rhs(factors: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = factors.len();
        Self::new(factors, vec![1.0; n])
    }

    /// i.i.d. `N(0, sigma^2)` factor entries, unit right-hand sides.
    pub fn random_gaussian<R: Rng + ?Sized>(n: usize, sigma: f64, rng: &mut R) -> Self {
        let factors = (0..n)
            .map(|_| {
                DMatrix::from_fn(n, n, |_, _| {
                    let z: f64 = StandardNormal.sample(rng);
                    sigma * z
                })
            })
            .collect();
        Self::with_unit_rhs(factors).expect("gaussian factors are finite")
    }

    /// i.i.d. uniform `[-1, 1]` factor entries, unit right-hand sides.
    pub fn random_uniform<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let factors = (0..n)
            .map(|_| DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..=1.0)))
            .collect();
        Self::with_unit_rhs(factors).expect("uniform factors are finite")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn factors(&self) -> &[DMatrix<f64>] {
        &self.factors
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    fn check_point(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension(format!("point has length {}, system dim is {}", x.len(), self.dim)));
        }
        Ok(())
    }

    /// Residuals `||A_i x||^2 - r_i`.
    pub fn evaluate(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_point(x)?;
        Ok(DVector::from_iterator(
            self.dim,
            self.factors
                .iter()
                .zip(&self.rhs)
                .map(|(a, r)| (a * x).norm_squared() - r),
        ))
    }

    pub fn gram(&self) -> GramSystem {
        GramSystem {
            grams: self
                .factors
                .iter()
                .map(|a| symmetrize(&(a.transpose() * a)))
                .collect(),
        }
    }

    /// Row `k` is the gradient `2 A_k^T A_k x` of `x -> ||A_k x||^2`.
    pub fn quadric_gradients(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_point(x)?;
        let mut jac = DMatrix::zeros(self.dim, self.dim);
        for (k, a) in self.factors.iter().enumerate() {
            let row = a.transpose() * (a * x) * 2.0;
            jac.set_row(k, &row.transpose());
        }
        Ok(jac)
    }

    /// Same right-hand sides, factors `A_i Z`. Solutions map back via `x = Z y`.
    pub fn with_basis(&self, z: &DMatrix<f64>) -> Result<Self> {
        if z.nrows() != self.dim || z.ncols() != self.dim {
            return Err(Error::Dimension("basis change must be dim x dim".into()));
        }
        Self::new(self.factors.iter().map(|a| a * z).collect(), self.rhs.clone())
    }

    /// `A_i -> lambda A_i`, `r_i -> lambda^2 r_i`; the solution set is unchanged.
    pub fn jointly_scaled(&self, lambda: f64) -> Result<Self> {
        Self::new(
            self.factors.iter().map(|a| a * lambda).collect(),
            self.rhs.iter().map(|r| r * lambda * lambda).collect(),
        )
    }

    /// Equivalent system with every right-hand side equal to one.
    pub fn to_unit_rhs(&self) -> Self {
        let factors = self
            .factors
            .iter()
            .zip(&self.rhs)
            .map(|(a, r)| a / r.sqrt())
            .collect();
        Self::with_unit_rhs(factors).expect("rescaling keeps factors finite")
    }
}

/// Tolerances for accepting externally supplied grams.
#[derive(Clone, Copy, Debug)]
pub struct GramTolerance {
    pub symmetry: f64,
    pub psd: f64,
}

impl Default for GramTolerance {
    fn default() -> Self {
        GramTolerance { symmetry: 1e-12, psd: 1e-10 }
    }
}

/// Quadratic-form matrices `Q_i = A_i^T A_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct GramSystem {
    grams: Vec<DMatrix<f64>>,
}

impl GramSystem {
    /// Accepts grams that are symmetric and positive semidefinite within `tol`.
    pub fn from_grams(grams: Vec<DMatrix<f64>>, tol: GramTolerance) -> Result<Self> {
        let n = grams.len();
        if n == 0 {
            return Err(Error::Invalid("empty gram system".into()));
        }
        for (i, q) in grams.iter().enumerate() {
            if q.nrows() != n || q.ncols() != n {
                return Err(Error::Dimension(format!("gram {i} must be {n}x{n}")));
            }
            let norm = q.norm();
            if (q - q.transpose()).norm() > tol.symmetry * norm.max(f64::MIN_POSITIVE) {
                return Err(Error::Invalid(format!("gram {i} is not symmetric")));
            }
            let eig = SymmetricEigen::new(symmetrize(q)).eigenvalues;
            let max = eig.iter().cloned().fold(0.0, f64::max);
            if eig.iter().any(|&l| l < -tol.psd * max) {
                return Err(Error::Invalid(format!("gram {i} is not positive semidefinite")));
            }
        }
        Ok(GramSystem { grams })
    }

    pub fn dim(&self) -> usize {
        self.grams.len()
    }

    pub fn grams(&self) -> &[DMatrix<f64>] {
        &self.grams
    }
}
