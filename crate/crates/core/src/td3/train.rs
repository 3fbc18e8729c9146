//! Off-policy training loop, checkpoints and policy evaluation.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::agent::{ActorPolicy, Agent};
use super::replay::{ReplayBuffer, Transition};
use super::TrainConfig;
use crate::env::{self, EnvConfig, EnvState};
use crate::error::{Error, Result};
use crate::oracle::{count_real_solutions, OracleOptions};
use crate::seeding::{derive_seed, rng_from, stream};

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRow {
    /// Global step count at the end of the episode.
    pub step: usize,
    pub episode: u64,
    pub mean_reward: f64,
    pub actor_loss: Option<f64>,
    pub critic_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<TrainingRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "step,episode,mean_reward,actor_loss,critic_loss")?;
        for r in &self.rows {
            writeln!(out, "{},{},{:e},{},{}", r.step, r.episode, r.mean_reward, opt(r.actor_loss), opt(r.critic_loss))?;
        }
        Ok(())
    }

    /// Mean of per-episode rewards over the first and last `fraction` of episodes.
    pub fn head_tail_means(&self, fraction: f64) -> Option<(f64, f64)> {
        let k = ((self.rows.len() as f64 * fraction).round() as usize).max(1);
        if self.rows.len() < 2 * k {
            return None;
        }
        let mean = |rows: &[TrainingRow]| rows.iter().map(|r| r.mean_reward).sum::<f64>() / rows.len() as f64;
        Some((mean(&self.rows[..k]), mean(&self.rows[self.rows.len() - k..])))
    }
}

/// Everything needed to continue an interrupted run bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub next_step: usize,
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    pub state: Vec<f64>,
    pub state_step_index: usize,
    pub episode_reward_sum: f64,
    pub last_actor_loss: Option<f64>,
    pub last_critic_loss: Option<f64>,
    pub log: TrainingLog,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Invalid(format!("checkpoint version {} is not supported", ckpt.version)));
        }
        Ok(ckpt)
    }
}

fn uniform_action<R: Rng + ?Sized>(dim: usize, cap: f64, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-cap..=cap)).collect()
}

/// A freshly initialized agent for these configs.
pub fn initial_agent(env_cfg: &EnvConfig, cfg: &TrainConfig) -> Agent {
    let mut rng = rng_from(cfg.seed, &[stream::AGENT, 0]);
    Agent::new(env_cfg.state_dim(), env_cfg.action_cap, &cfg.hidden, cfg, &mut rng)
}

pub fn train(env_cfg: &EnvConfig, cfg: &TrainConfig) -> Result<(Agent, TrainingLog)> {
    let done = train_with(env_cfg, cfg, None, &mut |_| Ok(()))?;
    Ok((done.agent, done.log))
}

/// Training loop with optional resume and a checkpoint sink called every
/// `checkpoint_every` steps. Returns the final checkpoint, from which a longer
/// run can continue.
pub fn train_with(
    env_cfg: &EnvConfig,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    env_cfg.validate()?;
    cfg.validate()?;
    let l = env_cfg.episode_length;
    let d = env_cfg.state_dim();

    let mut ck = match resume {
        Some(c) => {
            if &c.env != env_cfg || (TrainConfig { total_steps: cfg.total_steps, ..c.train.clone() }) != *cfg {
                return Err(Error::Invalid("checkpoint was written with different settings".into()));
            }
            Checkpoint { train: cfg.clone(), ..c }
        }
        None => {
            let first = env::reset(env_cfg, 0);
            Checkpoint {
                version: CHECKPOINT_VERSION,
                env: env_cfg.clone(),
                train: cfg.clone(),
                next_step: 0,
                agent: initial_agent(env_cfg, cfg),
                buffer: ReplayBuffer::new(cfg.buffer_capacity)?,
                state: first.flatten(),
                state_step_index: 0,
                episode_reward_sum: 0.0,
                last_actor_loss: None,
                last_critic_loss: None,
                log: TrainingLog::default(),
            }
        }
    };
    let mut state = EnvState::from_flat(env_cfg.n, &ck.state, ck.state_step_index)?;

    for t in ck.next_step..cfg.total_steps {
        let episode = (t / l) as u64;
        if t % l == 0 {
            state = env::reset(env_cfg, episode);
            ck.episode_reward_sum = 0.0;
        }
        let flat = state.flatten();
        let mut act_rng = rng_from(cfg.seed, &[stream::AGENT, 1, t as u64]);
        let action = if t < cfg.warmup_steps {
            uniform_action(d, env_cfg.action_cap, &mut act_rng)
        } else {
            ck.agent.select_action(&flat, cfg.exploration_noise, &mut act_rng)?
        };
        let out = env::step(&state, &action, env_cfg, episode)?;
        ck.episode_reward_sum += out.reward;
        ck.buffer.push(Transition {
            state: flat,
            action,
            reward: out.reward,
            next_state: out.state.flatten(),
            done: out.done,
        });

        if t >= cfg.warmup_steps && ck.buffer.len() >= cfg.batch_size {
            let mut rng = rng_from(cfg.seed, &[stream::AGENT, 2, t as u64]);
            let batch = ck.buffer.sample(cfg.batch_size, &mut rng)?;
            let report = ck.agent.train_step(&batch, cfg, &mut rng)?;
            ck.last_critic_loss = Some(report.critic_loss);
            if report.actor_loss.is_some() {
                ck.last_actor_loss = report.actor_loss;
            }
        }

        if out.done {
            let mean_reward = ck.episode_reward_sum / l as f64;
            ck.log.rows.push(TrainingRow {
                step: t + 1,
                episode,
                mean_reward,
                actor_loss: ck.last_actor_loss,
                critic_loss: ck.last_critic_loss,
            });
            log::info!("episode {episode}: mean reward {mean_reward:.4}");
        }
        state = out.state;
        ck.next_step = t + 1;

        if cfg.checkpoint_every > 0 && (t + 1) % cfg.checkpoint_every == 0 {
            ck.state = state.flatten();
            ck.state_step_index = state.step_index;
            on_checkpoint(&ck)?;
        }
    }
    ck.state = state.flatten();
    ck.state_step_index = state.step_index;
    Ok(ck)
}

#[derive(Clone, Copy, Debug)]
pub enum Policy<'a> {
    /// Deterministic actor output.
    Agent(&'a ActorPolicy),
    /// Uniform actions in `[-cap, cap]`.
    Random,
}

impl Policy<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Agent(_) => "agent",
            Policy::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub runs: usize,
    pub steps: usize,
    pub thresholds: Vec<f64>,
    pub seed: u64,
    /// Count real solutions of every visited state.
    pub oracle: Option<OracleOptions>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { runs: 20, steps: 20, thresholds: vec![80.0, 90.0, 100.0], seed: 1, oracle: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Reward after each step.
    pub rewards: Vec<f64>,
    /// Root counts of the initial state and of the state after each step.
    pub counts: Option<Vec<usize>>,
}

impl RunRecord {
    /// Counts when available, otherwise rewards, indexed by steps taken.
    fn metric(&self) -> Vec<f64> {
        match &self.counts {
            Some(c) => c.iter().map(|&v| v as f64).collect(),
            None => std::iter::once(f64::NAN).chain(self.rewards.iter().cloned()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub runs_exceeding: usize,
    /// Median number of steps before the metric first exceeds the threshold,
    /// over runs that exceed it.
    pub median_steps: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationTable {
    pub policy: String,
    pub n: usize,
    pub runs: Vec<RunRecord>,
    pub mean_reward: f64,
    pub mean_final_reward: f64,
    pub mean_final_count: Option<f64>,
    pub mean_max_count: Option<f64>,
    /// Whether thresholds were applied to root counts rather than rewards.
    pub thresholds_on_counts: bool,
    pub thresholds: Vec<ThresholdRow>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

impl EvaluationTable {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "policy,n,runs,mean_reward,mean_final_reward,mean_final_count,mean_max_count")?;
        writeln!(
            out,
            "{},{},{},{:e},{:e},{},{}",
            self.policy,
            self.n,
            self.runs.len(),
            self.mean_reward,
            self.mean_final_reward,
            opt(self.mean_final_count),
            opt(self.mean_max_count)
        )?;
        writeln!(out, "threshold,runs_exceeding,median_steps")?;
        for t in &self.thresholds {
            let med = t.median_steps.map(|m| m.to_string()).unwrap_or_else(|| "N/A".into());
            writeln!(out, "{},{},{}", t.threshold, t.runs_exceeding, med)?;
        }
        Ok(())
    }

    /// Per-step rows: `run,step,reward,count`.
    pub fn write_steps_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "run,step,reward,count")?;
        for (r, run) in self.runs.iter().enumerate() {
            for s in 0..=run.rewards.len() {
                let reward = if s == 0 { String::new() } else { format!("{:e}", run.rewards[s - 1]) };
                let count = run.counts.as_ref().map(|c| c[s].to_string()).unwrap_or_default();
                writeln!(out, "{r},{s},{reward},{count}")?;
            }
        }
        Ok(())
    }
}

/// Rolls `policy` for `cfg.runs` episodes of `cfg.steps` steps from fresh
/// resets of an environment seeded with `cfg.seed`.
pub fn evaluate_policy(policy: Policy, env_cfg: &EnvConfig, cfg: &EvalConfig) -> Result<EvaluationTable> {
    if cfg.runs == 0 || cfg.steps == 0 {
        return Err(Error::Invalid("evaluation needs at least one run and one step".into()));
    }
    let ecfg = EnvConfig { episode_length: cfg.steps, seed: cfg.seed, ..env_cfg.clone() };
    ecfg.validate()?;
    if let Policy::Agent(a) = policy {
        if a.state_dim != ecfg.state_dim() {
            return Err(Error::Dimension(format!("agent acts on {} entries, environment has {}", a.state_dim, ecfg.state_dim())));
        }
    }
    let count = |state: &EnvState, run: usize, step: usize| -> Result<Option<usize>> {
        match &cfg.oracle {
            None => Ok(None),
            Some(o) => {
                let opts = OracleOptions { seed: derive_seed(o.seed, &[stream::ORACLE, run as u64, step as u64]), ..o.clone() };
                Ok(Some(count_real_solutions(&state.system()?, &opts)?.count))
            }
        }
    };

    let mut runs = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs {
        let episode = run as u64;
        let mut state = env::reset(&ecfg, episode);
        let mut rewards = Vec::with_capacity(cfg.steps);
        let mut counts = count(&state, run, 0)?.map(|c| vec![c]);
        for s in 0..cfg.steps {
            let action = match policy {
                Policy::Agent(a) => a.select_action(&state.flatten(), 0.0, &mut rng_from(0, &[]))?,
                Policy::Random => {
                    let mut rng = rng_from(cfg.seed, &[stream::AGENT, 3, episode, s as u64]);
                    uniform_action(ecfg.state_dim(), ecfg.action_cap, &mut rng)
                }
            };
            let out = env::step(&state, &action, &ecfg, episode)?;
            rewards.push(out.reward);
            state = out.state;
            if let (Some(c), Some(v)) = (counts.as_mut(), count(&state, run, s + 1)?) {
                c.push(v);
            }
        }
        log::info!("{} run {run}: final reward {:.4}", policy.name(), rewards[cfg.steps - 1]);
        runs.push(RunRecord { rewards, counts });
    }

    let r = cfg.runs as f64;
    let mean_reward = runs.iter().flat_map(|x| x.rewards.iter()).sum::<f64>() / (r * cfg.steps as f64);
    let mean_final_reward = runs.iter().map(|x| x.rewards[cfg.steps - 1]).sum::<f64>() / r;
    let on_counts = cfg.oracle.is_some();
    let (mean_final_count, mean_max_count) = if on_counts {
        let c = |x: &RunRecord| x.counts.clone().unwrap_or_default();
        (
            Some(runs.iter().map(|x| *c(x).last().unwrap_or(&0) as f64).sum::<f64>() / r),
            Some(runs.iter().map(|x| c(x).into_iter().max().unwrap_or(0) as f64).sum::<f64>() / r),
        )
    } else {
        (None, None)
    };
    let thresholds = cfg
        .thresholds
        .iter()
        .map(|&threshold| {
            let firsts: Vec<f64> = runs
                .iter()
                .filter_map(|x| x.metric().iter().position(|&v| v > threshold).map(|p| p as f64))
                .collect();
            ThresholdRow { threshold, runs_exceeding: firsts.len(), median_steps: median(firsts) }
        })
        .collect();

    Ok(EvaluationTable {
        policy: policy.name().into(),
        n: ecfg.n,
        runs,
        mean_reward,
        mean_final_reward,
        mean_final_count,
        mean_max_count,
        thresholds_on_counts: on_counts,
        thresholds,
    })
}
