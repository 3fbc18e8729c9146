//! TD3 agent over the matrix environment, with hand-written backpropagation.

pub mod adam;
pub mod agent;
pub mod mlp;
pub mod replay;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use agent::{ActorPolicy, Agent, LossReport, TargetInfo};
pub use replay::{Batch, ReplayBuffer, Transition};
pub use train::{
    evaluate_policy, train, train_with, Checkpoint, EvalConfig, EvaluationTable, Policy, RunRecord, ThresholdRow,
    TrainingLog, TrainingRow,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub discount: f64,
    pub tau: f64,
    pub policy_delay: usize,
    /// Target-policy smoothing noise, as a fraction of the action cap.
    pub target_noise: f64,
    /// Clip of the smoothing noise, as a fraction of the action cap.
    pub noise_clip: f64,
    /// Exploration noise, as a fraction of the action cap.
    pub exploration_noise: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub warmup_steps: usize,
    pub buffer_capacity: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
    /// Checkpoint every this many steps; 0 disables checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 10_000,
            batch_size: 100,
            discount: 0.99,
            tau: 0.005,
            policy_delay: 2,
            target_noise: 0.2,
            noise_clip: 0.5,
            exploration_noise: 0.1,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            warmup_steps: 1000,
            buffer_capacity: 1_000_000,
            hidden: vec![500, 400, 300],
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::Invalid(format!("discount must lie in (0, 1], got {}", self.discount)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Invalid(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if self.policy_delay == 0 {
            return Err(Error::Invalid("policy_delay must be at least 1".into()));
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return Err(Error::Invalid("need 0 < batch_size <= buffer_capacity".into()));
        }
        for (name, v) in [
            ("target_noise", self.target_noise),
            ("noise_clip", self.noise_clip),
            ("exploration_noise", self.exploration_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be non-negative")));
            }
        }
        for (name, v) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Invalid("hidden layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { discount: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { discount: 1.0, ..Default::default() }.validate().is_ok());
        assert!(TrainConfig { tau: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { policy_delay: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { hidden: vec![], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn partial_json_uses_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"total_steps": 7, "tau": 1.0}"#).unwrap();
        assert_eq!(c.total_steps, 7);
        assert_eq!(c.batch_size, 100);
        assert_eq!(c.tau, 1.0);
    }
}
