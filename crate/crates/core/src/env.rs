//! Episodic environment over tuples of `n x n` matrices with entries in
//! `[-1, 1]`. Actions are entrywise perturbations capped at `action_cap`; the
//! reward is the Monte-Carlo root-count estimate of `||A_i x||^2 = 1`.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::quadric::QuadricSystem;
use crate::reward::{reward_pipeline, RewardConfig, RewardEstimate};
use crate::seeding::{derive_seed, rng_from, stream};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitDistribution {
    #[default]
    Uniform,
    /// Standard Gaussian entries clamped to `[-1, 1]`.
    ClampedGaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub n: usize,
    pub episode_length: usize,
    pub action_cap: f64,
    pub reward: RewardConfig,
    pub init: InitDistribution,
    pub seed: u64,
    /// Use `ln(1 + estimate)` as the reward instead of the raw estimate.
    pub log_reward: bool,
    /// Optional row-major `n x n` mask; entries where it is false stay zero in every matrix.
    pub mask: Option<Vec<bool>>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            n: 4,
            episode_length: 10,
            action_cap: 0.01,
            reward: RewardConfig { delta: 0.05, num_points: 2000, num_tuples: 50, ..Default::default() },
            init: InitDistribution::Uniform,
            seed: 0,
            log_reward: false,
            mask: None,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Invalid("n must be at least 2".into()));
        }
        if self.episode_length == 0 {
            return Err(Error::Invalid("episode_length must be at least 1".into()));
        }
        if !(self.action_cap > 0.0 && self.action_cap.is_finite()) {
            return Err(Error::Invalid("action_cap must be positive".into()));
        }
        if let Some(m) = &self.mask {
            if m.len() != self.n * self.n {
                return Err(Error::Dimension(format!("mask has {} entries, expected {}", m.len(), self.n * self.n)));
            }
        }
        self.reward.validate(self.n)?;
        Ok(())
    }

    /// Flattened state and action length `n^3`.
    pub fn state_dim(&self) -> usize {
        self.n * self.n * self.n
    }

    fn masked(&self, idx: usize) -> bool {
        let n2 = self.n * self.n;
        self.mask.as_ref().is_some_and(|m| !m[idx % n2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub factors: Vec<DMatrix<f64>>,
    pub step_index: usize,
}

impl EnvState {
    /// Entries of every matrix, row-major, matrices in order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.factors.len() * self.factors.len() * self.factors.len());
        for f in &self.factors {
            for i in 0..f.nrows() {
                for j in 0..f.ncols() {
                    out.push(f[(i, j)]);
                }
            }
        }
        out
    }

    pub fn from_flat(n: usize, flat: &[f64], step_index: usize) -> Result<Self> {
        if flat.len() != n * n * n {
            return Err(Error::Dimension(format!("state has {} entries, expected {}", flat.len(), n * n * n)));
        }
        let factors = flat.chunks(n * n).map(|c| DMatrix::from_row_slice(n, n, c)).collect();
        Ok(EnvState { factors, step_index })
    }

    pub fn system(&self) -> Result<QuadricSystem> {
        QuadricSystem::with_unit_rhs(self.factors.clone())
    }

    /// SHA-256 over the entry bit patterns and step index, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.step_index as u64).to_le_bytes());
        for v in self.flatten() {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Initial state of episode `episode`.
pub fn reset(cfg: &EnvConfig, episode: u64) -> EnvState {
    let n = cfg.n;
    let mut rng = rng_from(cfg.seed, &[stream::RESET, episode]);
    let mut flat: Vec<f64> = (0..cfg.state_dim())
        .map(|_| match cfg.init {
            InitDistribution::Uniform => rng.random_range(-1.0..=1.0),
            InitDistribution::ClampedGaussian => rng.sample::<f64, _>(StandardNormal).clamp(-1.0, 1.0),
        })
        .collect();
    for (k, v) in flat.iter_mut().enumerate() {
        if cfg.masked(k) {
            *v = 0.0;
        }
    }
    EnvState::from_flat(n, &flat, 0).expect("length matches")
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub estimate: RewardEstimate,
    pub done: bool,
}

/// Seed of the reward estimate at `(episode, step)`.
pub fn reward_seed(cfg: &EnvConfig, episode: u64, step: usize) -> u64 {
    derive_seed(cfg.seed, &[stream::REWARD, episode, step as u64])
}

/// Applies `action` (clamped to `[-cap, cap]`, then the state to `[-1, 1]`) and
/// scores the new system.
pub fn step(state: &EnvState, action: &[f64], cfg: &EnvConfig, episode: u64) -> Result<StepOutcome> {
    let d = cfg.state_dim();
    if action.len() != d {
        return Err(Error::Dimension(format!("action has {} entries, expected {d}", action.len())));
    }
    if state.step_index >= cfg.episode_length {
        return Err(Error::Invalid("episode already finished".into()));
    }
    let cap = cfg.action_cap;
    let mut flat = state.flatten();
    for (k, (v, a)) in flat.iter_mut().zip(action).enumerate() {
        if cfg.masked(k) {
            continue;
        }
        let a = if a.is_nan() { 0.0 } else { a.clamp(-cap, cap) };
        *v = (*v + a).clamp(-1.0, 1.0);
    }
    let next = EnvState::from_flat(cfg.n, &flat, state.step_index + 1)?;
    let estimate = score(&next, cfg, episode, state.step_index)?;
    let reward = if cfg.log_reward { estimate.value.ln_1p() } else { estimate.value };
    Ok(StepOutcome { done: next.step_index == cfg.episode_length, state: next, reward, estimate })
}

/// Reward estimate of `state` under the seed stream of `(episode, step)`.
pub fn score(state: &EnvState, cfg: &EnvConfig, episode: u64, step: usize) -> Result<RewardEstimate> {
    let reward_cfg = RewardConfig { seed: reward_seed(cfg, episode, step), ..cfg.reward.clone() };
    reward_pipeline(&state.system()?, &reward_cfg)
}

/// CSV transition log: `episode,step,reward,state_hash`.
pub struct TransitionLog<W: Write> {
    out: W,
}

impl<W: Write> TransitionLog<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "episode,step,reward,state_hash")?;
        Ok(TransitionLog { out })
    }

    pub fn record(&mut self, episode: u64, step: usize, reward: f64, state: &EnvState) -> Result<()> {
        writeln!(self.out, "{episode},{step},{reward:e},{}", state.hash())?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EnvConfig {
        EnvConfig {
            n: 3,
            episode_length: 3,
            reward: RewardConfig { delta: 0.1, num_points: 200, num_tuples: 10, ..Default::default() },
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn reset_is_deterministic_and_bounded() {
        let c = cfg();
        assert_eq!(reset(&c, 4), reset(&c, 4));
        assert_ne!(reset(&c, 4), reset(&c, 5));
        let s = reset(&c, 4);
        assert_eq!(s.step_index, 0);
        assert!(s.flatten().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn uniform_reset_has_zero_mean() {
        let c = EnvConfig { n: 10, ..cfg() };
        let mut sum = 0.0;
        let mut count = 0;
        for e in 0..100 {
            for v in reset(&c, e).flatten() {
                sum += v;
                count += 1;
            }
        }
        // Uniform[-1, 1] has variance 1/3.
        let se = (1.0 / 3.0 / count as f64).sqrt();
        assert!(count == 100_000);
        assert!((sum / count as f64).abs() <= 3.0 * se);
    }

    #[test]
    fn zero_action_keeps_state() {
        let c = cfg();
        let s = reset(&c, 0);
        let out = step(&s, &vec![0.0; 27], &c, 0).unwrap();
        assert_eq!(out.state.factors, s.factors);
        assert_eq!(out.state.step_index, 1);
        assert_eq!(out.estimate, score(&out.state, &c, 0, 0).unwrap());
        assert!(!out.done);
    }

    #[test]
    fn action_is_capped() {
        let c = cfg();
        let mut s = reset(&c, 1);
        s.factors[0][(0, 0)] = 0.5;
        s.factors[0][(0, 1)] = 0.995;
        let mut a = vec![0.0; 27];
        a[0] = 10.0;
        a[1] = 10.0;
        a[2] = -10.0;
        let out = step(&s, &a, &c, 1).unwrap();
        assert_eq!(out.state.factors[0][(0, 0)], 0.5 + 0.01);
        assert_eq!(out.state.factors[0][(0, 1)], 1.0);
        assert!((out.state.factors[0][(0, 2)] - (s.factors[0][(0, 2)] - 0.01).max(-1.0)).abs() < 1e-15);
        assert!(step(&s, &[0.0; 5], &c, 1).is_err());
    }

    #[test]
    fn episode_ends_after_length() {
        let c = EnvConfig { episode_length: 1, ..cfg() };
        let s = reset(&c, 2);
        let out = step(&s, &vec![0.0; 27], &c, 2).unwrap();
        assert!(out.done);
        assert!(step(&out.state, &vec![0.0; 27], &c, 2).is_err());
    }

    #[test]
    fn mask_pins_entries_to_zero() {
        let mut mask = vec![true; 9];
        mask[4] = false;
        let c = EnvConfig { mask: Some(mask), ..cfg() };
        let s = reset(&c, 3);
        let out = step(&s, &vec![0.01; 27], &c, 3).unwrap();
        for f in &out.state.factors {
            assert_eq!(f[(1, 1)], 0.0);
        }
    }

    #[test]
    fn state_round_trip_and_hash() {
        let c = cfg();
        let s = reset(&c, 6);
        let back = EnvState::from_flat(3, &s.flatten(), 0).unwrap();
        assert_eq!(s, back);
        assert_eq!(s.hash(), back.hash());
        assert_eq!(s.hash().len(), 64);
        let mut log = TransitionLog::new(Vec::new()).unwrap();
        log.record(0, 1, 2.5, &s).unwrap();
        let text = String::from_utf8(log.into_inner()).unwrap();
        assert!(text.starts_with("episode,step,reward,state_hash\n0,1,2.5e0,"));
    }
}
