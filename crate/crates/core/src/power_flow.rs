//! Quadric form of the lossless, all-PV power-flow equations.
//!
//! Variables are ordered `z = (x_0, .., x_{n-1}, y_0, .., y_{n-1})` with
//! `x_k = cos(theta_k)`, `y_k = sin(theta_k)`. Node 0 is the slack bus.
//! The raw equations are
//!
//! * `z^T Q_k z = P_k` with `P_k = sum_m b_km (x_m y_k - x_k y_m)` for `k >= 1`,
//! * `z^T Q_0 z = 1` with `Q_0` selecting `x_0^2`,
//! * `z^T S_k z = 1` with `S_k` selecting `x_k^2 + y_k^2`.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, numerical_rank};
use crate::quadric::QuadricSystem;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub k: usize,
    pub m: usize,
    /// Susceptance `b_km = b_mk`, per-unit.
    pub susceptance: f64,
}

/// Weighted undirected network with a slack bus at node 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkWire", into = "NetworkWire")]
pub struct PowerNetwork {
    node_count: usize,
    edges: Vec<Edge>,
    /// `P_1 .. P_{n-1}`.
    injections: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct NetworkWire {
    n: usize,
    edges: Vec<(usize, usize, f64)>,
    #[serde(rename = "P")]
    p: Vec<f64>,
}

impl TryFrom<NetworkWire> for PowerNetwork {
    type Error = Error;

    fn try_from(w: NetworkWire) -> Result<Self> {
        let edges = w
            .edges
            .into_iter()
            .map(|(k, m, b)| Edge { k, m, susceptance: b })
            .collect();
        PowerNetwork::new(w.n, edges, w.p)
    }
}

impl From<PowerNetwork> for NetworkWire {
    fn from(net: PowerNetwork) -> Self {
        NetworkWire {
            n: net.node_count,
            edges: net.edges.iter().map(|e| (e.k, e.m, e.susceptance)).collect(),
            p: net.injections,
        }
    }
}

impl PowerNetwork {
    pub fn new(node_count: usize, edges: Vec<Edge>, injections: Vec<f64>) -> Result<Self> {
        if node_count < 2 {
            return Err(Error::Invalid("a network needs at least two nodes".into()));
        }
        if injections.len() != node_count - 1 {
            return Err(Error::Dimension(format!(
                "expected {} injections (P_1..P_{{n-1}}), got {}",
                node_count - 1,
                injections.len()
            )));
        }
        if injections.iter().any(|p| !p.is_finite()) {
            return Err(Error::Invalid("injections must be finite".into()));
        }
        let mut seen = BTreeSet::new();
        for e in &edges {
            if e.k >= node_count || e.m >= node_count {
                return Err(Error::Invalid(format!("edge ({}, {}) references a missing node", e.k, e.m)));
            }
            if e.k == e.m {
                return Err(Error::Invalid(format!("self-loop at node {}", e.k)));
            }
            if !e.susceptance.is_finite() {
                return Err(Error::Invalid(format!("edge ({}, {}) has non-finite susceptance", e.k, e.m)));
            }
            if !seen.insert((e.k.min(e.m), e.k.max(e.m))) {
                return Err(Error::DuplicateEdge(e.k, e.m));
            }
        }
        let net = PowerNetwork { node_count, edges, injections };
        if let Some(lost) = net.first_unreachable() {
            return Err(Error::Disconnected(lost));
        }
        Ok(net)
    }

    /// Path `0 - 1 - .. - (n-1)` with the given susceptances.
    pub fn path(susceptances: &[f64], injections: Vec<f64>) -> Result<Self> {
        let edges = susceptances
            .iter()
            .enumerate()
            .map(|(i, &b)| Edge { k: i, m: i + 1, susceptance: b })
            .collect();
        Self::new(susceptances.len() + 1, edges, injections)
    }

    /// Random spanning tree plus each remaining pair with probability `extra_edge_prob`.
    /// Susceptances are uniform on `[0.5, 2]`, injections uniform on `[-1, 1]`.
    pub fn random<R: Rng + ?Sized>(node_count: usize, extra_edge_prob: f64, rng: &mut R) -> Result<Self> {
        if node_count < 2 {
            return Err(Error::Invalid("a network needs at least two nodes".into()));
        }
        let mut pairs = BTreeSet::new();
        for v in 1..node_count {
            let parent = rng.random_range(0..v);
            pairs.insert((parent, v));
        }
        for k in 0..node_count {
            for m in k + 1..node_count {
                if !pairs.contains(&(k, m)) && rng.random::<f64>() < extra_edge_prob {
                    pairs.insert((k, m));
                }
            }
        }
        let edges = pairs
            .into_iter()
            .map(|(k, m)| Edge { k, m, susceptance: rng.random_range(0.5..=2.0) })
            .collect();
        let injections = (1..node_count).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Self::new(node_count, edges, injections)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn injections(&self) -> &[f64] {
        &self.injections
    }

    fn first_unreachable(&self) -> Option<usize> {
        let mut adj = vec![Vec::new(); self.node_count];
        for e in &self.edges {
            adj[e.k].push(e.m);
            adj[e.m].push(e.k);
        }
        let mut seen = vec![false; self.node_count];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        seen.iter().position(|s| !s)
    }
}

/// The raw forms `Q_0 .. Q_{n-1}` and selectors `S_0 .. S_{n-1}`, all `2n x 2n`.
#[derive(Clone, Debug)]
pub struct RawQuadricForms {
    pub node_count: usize,
    /// Index 0 is the slack form `x_0^2`; index `k >= 1` is the `P_k` form.
    pub power_forms: Vec<DMatrix<f64>>,
    pub selector_forms: Vec<DMatrix<f64>>,
    /// Constant each power form equals: 1 for the slack form, `P_k` otherwise.
    pub power_values: Vec<f64>,
}

pub fn build_raw_forms(network: &PowerNetwork) -> RawQuadricForms {
    let n = network.node_count;
    let x = |k: usize| k;
    let y = |k: usize| n + k;

    let mut power_forms = vec![DMatrix::zeros(2 * n, 2 * n); n];
    power_forms[0][(x(0), x(0))] = 1.0;
    for e in &network.edges {
        // b (x_m y_k - x_k y_m) contributes to P_k, and with roles swapped to P_m.
        for (k, m) in [(e.k, e.m), (e.m, e.k)] {
            if k == 0 {
                continue;
            }
            let half = 0.5 * e.susceptance;
            let q = &mut power_forms[k];
            q[(x(m), y(k))] += half;
            q[(y(k), x(m))] += half;
            q[(x(k), y(m))] -= half;
            q[(y(m), x(k))] -= half;
        }
    }

    let selector_forms = (0..n)
        .map(|k| {
            let mut s = DMatrix::zeros(2 * n, 2 * n);
            s[(x(k), x(k))] = 1.0;
            s[(y(k), y(k))] = 1.0;
            s
        })
        .collect();

    let mut power_values = vec![1.0];
    power_values.extend_from_slice(&network.injections);

    RawQuadricForms { node_count: n, power_forms, selector_forms, power_values }
}

/// Combination coefficients. Entry `(j, k)` multiplies raw form `j` in output
/// quadric `k` (`A_k` for `alphas`, `B_{n+k}` for `betas`/`gammas`).
#[derive(Clone, Debug)]
pub struct Coefficients {
    pub alphas: DMatrix<f64>,
    pub betas: DMatrix<f64>,
    pub gammas: DMatrix<f64>,
}

impl Coefficients {
    fn validate(&self, n: usize) -> Result<()> {
        for (name, m) in [("alphas", &self.alphas), ("betas", &self.betas), ("gammas", &self.gammas)] {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::Dimension(format!("{name} must be {n}x{n}")));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("{name} has a non-finite entry")));
            }
        }
        if self.alphas.iter().any(|&a| a < 0.0) {
            return Err(Error::Invalid("alphas must be non-negative".into()));
        }
        if self.gammas.iter().any(|&g| g <= 0.0) {
            return Err(Error::Invalid("gammas must be strictly positive".into()));
        }
        Ok(())
    }

    /// Randomized constructor: alphas and betas in `[1, 2)`, gammas small enough
    /// that every `B_k` is strictly diagonally dominant and its constant stays positive.
    pub fn random<R: Rng + ?Sized>(raw: &RawQuadricForms, rng: &mut R) -> Self {
        let n = raw.node_count;
        let mut row_sum = 0.0f64;
        for r in 0..2 * n {
            let s: f64 = raw.power_forms[1..]
                .iter()
                .map(|q| q.row(r).iter().map(|v| v.abs()).sum::<f64>())
                .sum();
            row_sum = row_sum.max(s);
        }
        let p_sum: f64 = raw.power_values[1..].iter().map(|p| p.abs()).sum();
        let gamma_max = 0.5 / row_sum.max(p_sum).max(1.0);
        Coefficients {
            alphas: DMatrix::from_fn(n, n, |_, _| 1.0 + rng.random::<f64>()),
            betas: DMatrix::from_fn(n, n, |_, _| 1.0 + rng.random::<f64>()),
            gammas: DMatrix::from_fn(n, n, |_, _| gamma_max * (1.0 - rng.random::<f64>())),
        }
    }
}

/// The `2n` combined symmetric matrices and their constants, before factoring.
pub fn combined_forms(raw: &RawQuadricForms, coef: &Coefficients) -> Result<(Vec<DMatrix<f64>>, Vec<f64>)> {
    let n = raw.node_count;
    coef.validate(n)?;
    let mut forms = Vec::with_capacity(2 * n);
    let mut constants = Vec::with_capacity(2 * n);
    // A_k = sum_j alpha_jk S_j; every selector equation has constant 1.
    for k in 0..n {
        let mut m = DMatrix::zeros(2 * n, 2 * n);
        let mut c = 0.0;
        for j in 0..n {
            m += &raw.selector_forms[j] * coef.alphas[(j, k)];
            c += coef.alphas[(j, k)];
        }
        forms.push(m);
        constants.push(c);
    }
    // B_k = sum_j beta_jk S_j + sum_j gamma_jk Q_j; constant follows linearly.
    for k in 0..n {
        let mut m = DMatrix::zeros(2 * n, 2 * n);
        let mut c = 0.0;
        for j in 0..n {
            m += &raw.selector_forms[j] * coef.betas[(j, k)];
            m += &raw.power_forms[j] * coef.gammas[(j, k)];
            c += coef.betas[(j, k)] + coef.gammas[(j, k)] * raw.power_values[j];
        }
        forms.push(m);
        constants.push(c);
    }
    Ok((forms, constants))
}

/// Positive-definite combination of the raw forms as a `2n`-dimensional
/// quadric system. Each factor is the transposed Cholesky factor of its form.
pub fn combine_to_definite(raw: &RawQuadricForms, coef: &Coefficients) -> Result<QuadricSystem> {
    let (forms, constants) = combined_forms(raw, coef)?;
    let dim = forms.len();

    let mut factors = Vec::with_capacity(dim);
    for (index, m) in forms.iter().enumerate() {
        let chol = cholesky(m).ok_or(Error::NotPositiveDefinite { index })?;
        factors.push(chol.l().transpose());
    }
    let tri = dim * (dim + 1) / 2;
    let mut stacked = DMatrix::zeros(tri, dim);
    for (col, m) in forms.iter().enumerate() {
        let mut r = 0;
        for i in 0..dim {
            for j in i..dim {
                stacked[(r, col)] = m[(i, j)];
                r += 1;
            }
        }
    }
    let rank = numerical_rank(&stacked, 1e-10);
    if rank < dim {
        return Err(Error::RankDeficient { rank, expected: dim });
    }

    if let Some(i) = constants.iter().position(|c| *c <= 0.0) {
        return Err(Error::Invalid(format!(
            "combined equation {i} has non-positive constant {}; no real solutions",
            constants[i]
        )));
    }
    QuadricSystem::new(factors, constants)
}

/// Builds a definite system with freshly drawn coefficients, retrying on failure.
pub fn build_system<R: Rng + ?Sized>(network: &PowerNetwork, rng: &mut R) -> Result<QuadricSystem> {
    const ATTEMPTS: usize = 32;
    let raw = build_raw_forms(network);
    let mut last = None;
    for _ in 0..ATTEMPTS {
        match combine_to_definite(&raw, &Coefficients::random(&raw, rng)) {
            Ok(sys) => return Ok(sys),
            Err(e @ (Error::NotPositiveDefinite { .. } | Error::RankDeficient { .. } | Error::Invalid(_))) => {
                last = Some(e)
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt was made"))
}

/// Positions that may be nonzero in any admissible combination: the paired
/// diagonal plus the `x_k`-`y_m` couplings of existing edges.
pub fn sparsity_pattern(network: &PowerNetwork) -> DMatrix<bool> {
    let n = network.node_count;
    let mut mask = DMatrix::from_element(2 * n, 2 * n, false);
    for i in 0..2 * n {
        mask[(i, i)] = true;
    }
    for e in &network.edges {
        for (a, b) in [(e.k, n + e.m), (e.m, n + e.k)] {
            mask[(a, b)] = true;
            mask[(b, a)] = true;
        }
    }
    mask
}

/// True when every entry outside `mask` is exactly zero.
pub fn respects_mask(m: &DMatrix<f64>, mask: &DMatrix<bool>) -> bool {
    m.shape() == mask.shape() && m.iter().zip(mask.iter()).all(|(v, &allowed)| allowed || *v == 0.0)
}
