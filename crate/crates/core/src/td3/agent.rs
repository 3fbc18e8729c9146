//! Twin critics, delayed policy updates and target-policy smoothing.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::mlp::{Gradient, Mlp, Output};
use super::replay::Batch;
use super::TrainConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub state_dim: usize,
    pub action_cap: f64,
    pub actor: Mlp,
    pub actor_target: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub critic1_target: Mlp,
    pub critic2_target: Mlp,
    pub actor_opt: Adam,
    pub critic1_opt: Adam,
    pub critic2_opt: Adam,
    /// Critic updates performed so far.
    pub critic_updates: u64,
}

/// Deployable policy without critics, targets or optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorPolicy {
    pub state_dim: usize,
    pub action_cap: f64,
    pub actor: Mlp,
}

impl ActorPolicy {
    pub fn select_action<R: Rng + ?Sized>(&self, state: &[f64], noise_sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
        act(&self.actor, self.state_dim, self.action_cap, state, noise_sigma, rng)
    }
}

/// Actor output plus Gaussian noise of scale `noise_sigma * cap`, clamped to the box.
fn act<R: Rng + ?Sized>(actor: &Mlp, state_dim: usize, cap: f64, state: &[f64], noise_sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    if state.len() != state_dim {
        return Err(Error::Dimension(format!("state has {} entries, expected {}", state.len(), state_dim)));
    }
    let out = actor.forward(&DMatrix::from_column_slice(state_dim, 1, state));
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!(
            "actor produced a non-finite action; parameters finite: {}, sizes {:?}",
            actor.is_finite(),
            actor.sizes()
        )));
    }
    Ok(out
        .iter()
        .map(|v| {
            let noise = if noise_sigma > 0.0 { noise_sigma * cap * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            (v + noise).clamp(-cap, cap)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetInfo {
    pub y: DVector<f64>,
    pub q1: DVector<f64>,
    pub q2: DVector<f64>,
    pub next_actions: DMatrix<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
    pub actor_updated: bool,
    pub targets_updated: bool,
}

fn stack(states: &DMatrix<f64>, actions: &DMatrix<f64>) -> DMatrix<f64> {
    let (d, b) = states.shape();
    let a = actions.nrows();
    let mut out = DMatrix::zeros(d + a, b);
    out.rows_mut(0, d).copy_from(states);
    out.rows_mut(d, a).copy_from(actions);
    out
}

fn row(m: DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.row(0).iter().cloned())
}

impl Agent {
    /// Actor `D -> hidden.. -> D` with a `cap * tanh` output whose last layer
    /// starts near zero, and critics `2D -> hidden.. -> 1`.
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_cap: f64, hidden: &[usize], cfg: &TrainConfig, rng: &mut R) -> Self {
        let mut actor_sizes = vec![state_dim];
        actor_sizes.extend_from_slice(hidden);
        actor_sizes.push(state_dim);
        let mut critic_sizes = vec![2 * state_dim];
        critic_sizes.extend_from_slice(hidden);
        critic_sizes.push(1);
        let actor = Mlp::new(&actor_sizes, Output::Tanh { scale: action_cap }, 1e-3, rng);
        let critic1 = Mlp::new(&critic_sizes, Output::Linear, 1.0, rng);
        let critic2 = Mlp::new(&critic_sizes, Output::Linear, 1.0, rng);
        Agent {
            state_dim,
            action_cap,
            actor_target: actor.clone(),
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            actor_opt: Adam::new(&actor, cfg.actor_lr),
            critic1_opt: Adam::new(&critic1, cfg.critic_lr),
            critic2_opt: Adam::new(&critic2, cfg.critic_lr),
            actor,
            critic1,
            critic2,
            critic_updates: 0,
        }
    }

    /// Policy output plus `N(0, (sigma * cap)^2)` noise, clamped to `[-cap, cap]`.
    pub fn select_action<R: Rng + ?Sized>(&self, state: &[f64], noise_sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
        act(&self.actor, self.state_dim, self.action_cap, state, noise_sigma, rng)
    }

    /// The online actor alone, enough to run the learned policy.
    pub fn policy(&self) -> ActorPolicy {
        ActorPolicy { state_dim: self.state_dim, action_cap: self.action_cap, actor: self.actor.clone() }
    }

    /// Critics see actions divided by the cap so both input halves live on
    /// the same unit scale; with raw actions of size `cap << 1` the critics
    /// barely resolve the action and the actor collapses onto the box corners.
    fn critic_input(&self, states: &DMatrix<f64>, actions: &DMatrix<f64>) -> DMatrix<f64> {
        stack(states, &(actions / self.action_cap))
    }

    /// Smoothed target actions and `y = r + gamma (1 - done) min(Q1', Q2')`.
    pub fn compute_targets<R: Rng + ?Sized>(&self, batch: &Batch, cfg: &TrainConfig, rng: &mut R) -> TargetInfo {
        let cap = self.action_cap;
        let clip = cfg.noise_clip * cap;
        let mut next_actions = self.actor_target.forward(&batch.next_states);
        for v in next_actions.iter_mut() {
            let noise: f64 = cfg.target_noise * cap * rng.sample::<f64, _>(StandardNormal);
            *v = (*v + noise.clamp(-clip, clip)).clamp(-cap, cap);
        }
        let input = self.critic_input(&batch.next_states, &next_actions);
        let q1 = row(self.critic1_target.forward(&input));
        let q2 = row(self.critic2_target.forward(&input));
        let y = DVector::from_fn(batch.len(), |k, _| {
            batch.rewards[k] + cfg.discount * (1.0 - batch.dones[k]) * q1[k].min(q2[k])
        });
        TargetInfo { y, q1, q2, next_actions }
    }

    /// Summed mean-squared errors of both critics against `y`, with gradients.
    pub fn critic_loss(&self, batch: &Batch, y: &DVector<f64>) -> (f64, Gradient, Gradient) {
        let input = self.critic_input(&batch.states, &batch.actions);
        let b = batch.len() as f64;
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(2);
        for critic in [&self.critic1, &self.critic2] {
            let trace = critic.trace(&input);
            let err = DMatrix::from_fn(1, batch.len(), |_, k| trace.output()[(0, k)] - y[k]);
            loss += err.norm_squared() / b;
            grads.push(critic.backward(&trace, &(err * (2.0 / b))).0);
        }
        let g2 = grads.pop().expect("two critics");
        let g1 = grads.pop().expect("two critics");
        (loss, g1, g2)
    }

    /// `-mean Q1(s, pi(s))` and its gradient w.r.t. the actor parameters.
    pub fn actor_loss(&self, states: &DMatrix<f64>) -> (f64, Gradient) {
        let b = states.ncols() as f64;
        let actor_trace = self.actor.trace(states);
        let input = self.critic_input(states, actor_trace.output());
        let critic_trace = self.critic1.trace(&input);
        let loss = -critic_trace.output().sum() / b;
        let d_q = DMatrix::from_element(1, states.ncols(), -1.0 / b);
        let (_, d_input) = self.critic1.backward(&critic_trace, &d_q);
        let d_actions = d_input.rows(self.state_dim, self.state_dim) / self.action_cap;
        let (grad, _) = self.actor.backward(&actor_trace, &d_actions);
        (loss, grad)
    }

    /// One TD3 update: both critics every call; actor and targets every
    /// `policy_delay` critic updates.
    pub fn train_step<R: Rng + ?Sized>(&mut self, batch: &Batch, cfg: &TrainConfig, rng: &mut R) -> Result<LossReport> {
        let targets = self.compute_targets(batch, cfg, rng);
        let (critic_loss, g1, g2) = self.critic_loss(batch, &targets.y);
        if !critic_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "critic loss is {critic_loss}; target range [{:e}, {:e}]",
                targets.y.min(),
                targets.y.max()
            )));
        }
        self.critic1_opt.step(&mut self.critic1, &g1);
        self.critic2_opt.step(&mut self.critic2, &g2);
        self.critic_updates += 1;

        let mut report = LossReport { critic_loss, actor_loss: None, actor_updated: false, targets_updated: false };
        if self.critic_updates.is_multiple_of(cfg.policy_delay as u64) {
            let (actor_loss, ga) = self.actor_loss(&batch.states);
            if !actor_loss.is_finite() {
                return Err(Error::Numerical(format!("actor loss is {actor_loss}")));
            }
            self.actor_opt.step(&mut self.actor, &ga);
            self.actor_target.soft_update(&self.actor, cfg.tau);
            self.critic1_target.soft_update(&self.critic1, cfg.tau);
            self.critic2_target.soft_update(&self.critic2, cfg.tau);
            report.actor_loss = Some(actor_loss);
            report.actor_updated = true;
            report.targets_updated = true;
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::td3::replay::{ReplayBuffer, Transition};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig { batch_size: 16, hidden: vec![8, 8, 8], ..Default::default() }
    }

    fn tiny_agent(rng: &mut ChaCha8Rng) -> Agent {
        let mut a = Agent::new(8, 0.5, &[8, 8, 8], &tiny_cfg(), rng);
        // Full-scale last layer so actor gradients are not vanishingly small.
        a.actor = Mlp::new(&[8, 8, 8, 8, 8], Output::Tanh { scale: 0.5 }, 1.0, rng);
        a.actor_target = a.actor.clone();
        a
    }

    fn batch(rng: &mut ChaCha8Rng, size: usize, dim: usize) -> Batch {
        let mut buf = ReplayBuffer::new(size).unwrap();
        for _ in 0..size {
            buf.push(Transition {
                state: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                action: (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
                reward: rng.random_range(0.0..5.0),
                next_state: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                done: rng.random_bool(0.2),
            });
        }
        buf.sample(size, rng).unwrap()
    }

    #[test]
    fn critic_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let agent = tiny_agent(&mut rng);
        let b = batch(&mut rng, 16, 8);
        let y = DVector::from_fn(16, |_, _| rng.random_range(0.0..3.0));
        let (_, g1, g2) = agent.critic_loss(&b, &y);
        let h = 1e-6;
        for probe in 0..20 {
            let which = probe % 2;
            let k = rng.random_range(0..4);
            let net = if which == 0 { &agent.critic1 } else { &agent.critic2 };
            let (r, c) = (rng.random_range(0..net.layers[k].weight.nrows()), rng.random_range(0..net.layers[k].weight.ncols()));
            let mut p = agent.clone();
            let mut m = agent.clone();
            let (pn, mn) = if which == 0 { (&mut p.critic1, &mut m.critic1) } else { (&mut p.critic2, &mut m.critic2) };
            pn.layers[k].weight[(r, c)] += h;
            mn.layers[k].weight[(r, c)] -= h;
            let fd = (p.critic_loss(&b, &y).0 - m.critic_loss(&b, &y).0) / (2.0 * h);
            let an = if which == 0 { g1.layers[k].weight[(r, c)] } else { g2.layers[k].weight[(r, c)] };
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-4), "{fd} vs {an}");
        }
    }

    #[test]
    fn actor_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        let agent = tiny_agent(&mut rng);
        let b = batch(&mut rng, 16, 8);
        let (_, g) = agent.actor_loss(&b.states);
        let h = 1e-6;
        for _ in 0..20 {
            let k = rng.random_range(0..4);
            let l = &agent.actor.layers[k];
            let (r, c) = (rng.random_range(0..l.weight.nrows()), rng.random_range(0..l.weight.ncols()));
            let mut p = agent.clone();
            let mut m = agent.clone();
            p.actor.layers[k].weight[(r, c)] += h;
            m.actor.layers[k].weight[(r, c)] -= h;
            let fd = (p.actor_loss(&b.states).0 - m.actor_loss(&b.states).0) / (2.0 * h);
            let an = g.layers[k].weight[(r, c)];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-4), "{fd} vs {an}");
        }
    }

    #[test]
    fn targets_use_twin_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(93);
        let agent = tiny_agent(&mut rng);
        let b = batch(&mut rng, 32, 8);
        let cfg = tiny_cfg();
        let t = agent.compute_targets(&b, &cfg, &mut rng);
        for k in 0..32 {
            let expected = b.rewards[k] + cfg.discount * (1.0 - b.dones[k]) * t.q1[k].min(t.q2[k]);
            assert_eq!(t.y[k], expected);
        }
        assert!(t.q1.iter().zip(t.q2.iter()).any(|(a, c)| a != c));
        assert!(t.next_actions.iter().all(|v| v.abs() <= agent.action_cap));
        let myopic = agent.compute_targets(&b, &TrainConfig { discount: 0.0, ..cfg }, &mut rng);
        assert_eq!(myopic.y, b.rewards);
    }

    #[test]
    fn delayed_and_soft_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(94);
        let mut agent = tiny_agent(&mut rng);
        let b = batch(&mut rng, 16, 8);
        let cfg = TrainConfig { policy_delay: 3, tau: 0.1, ..tiny_cfg() };
        let mut actor_updates = 0;
        for step in 1..=9 {
            let actor_before = agent.actor.clone();
            let target_before = agent.critic1_target.clone();
            let report = agent.train_step(&b, &cfg, &mut rng).unwrap();
            assert_eq!(report.actor_updated, step % 3 == 0);
            if report.targets_updated {
                actor_updates += 1;
                for ((t, old), online) in agent.critic1_target.layers.iter().zip(&target_before.layers).zip(&agent.critic1.layers) {
                    let expected = &old.weight * 0.9 + &online.weight * 0.1;
                    assert!((&t.weight - expected).amax() <= 1e-12);
                }
            } else {
                assert_eq!(agent.actor, actor_before);
                assert_eq!(agent.critic1_target, target_before);
            }
        }
        assert_eq!(actor_updates, 3);
    }

    #[test]
    fn hard_update_copies_online_networks() {
        let mut rng = ChaCha8Rng::seed_from_u64(95);
        let mut agent = tiny_agent(&mut rng);
        let b = batch(&mut rng, 16, 8);
        let cfg = TrainConfig { policy_delay: 1, tau: 1.0, ..tiny_cfg() };
        agent.train_step(&b, &cfg, &mut rng).unwrap();
        assert_eq!(agent.actor_target, agent.actor);
        assert_eq!(agent.critic1_target, agent.critic1);
        assert_eq!(agent.critic2_target, agent.critic2);
    }

    #[test]
    fn action_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(96);
        let mut agent = tiny_agent(&mut rng);
        let s: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let noisy = agent.select_action(&s, 0.5, &mut rng).unwrap();
        assert!(noisy.iter().all(|v| v.abs() <= 0.5));
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(agent.select_action(&s, 0.5, &mut r1).unwrap(), agent.select_action(&s, 0.5, &mut r2).unwrap());
        assert_ne!(agent.select_action(&s, 0.5, &mut r1).unwrap(), agent.select_action(&s, 0.5, &mut r1).unwrap());

        let last = agent.actor.layers.len() - 1;
        agent.actor.layers[last].weight.fill(0.0);
        agent.actor.layers[last].bias.fill(0.0);
        assert!(agent.select_action(&s, 0.0, &mut rng).unwrap().iter().all(|v| *v == 0.0));
        agent.actor.layers[last].bias[0] = f64::NAN;
        assert!(agent.select_action(&s, 0.0, &mut rng).is_err());
    }

    #[test]
    fn default_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let cfg = TrainConfig::default();
        let agent = Agent::new(64, 0.01, &cfg.hidden, &cfg, &mut rng);
        assert_eq!(agent.actor.sizes(), vec![64, 500, 400, 300, 64]);
        assert_eq!(agent.critic1.sizes(), vec![128, 500, 400, 300, 1]);
        let s = vec![0.3; 64];
        let a = agent.select_action(&s, 0.0, &mut rng).unwrap();
        assert_eq!(a.len(), 64);
        // The small final layer keeps initial actions well inside the cap.
        assert!(a.iter().all(|v| v.abs() < 0.01 * 0.05));
    }
}
