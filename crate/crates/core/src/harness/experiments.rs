//! Desk-scale experiment drivers: normalization accuracy, the delta sweep,
//! and the agent-versus-random comparison.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::stats::spearman;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::normalization::{normalize, ScalingOptions};
use crate::oracle::{count_real_solutions, OracleOptions};
use crate::quadric::QuadricSystem;
use crate::reward::{reward_pipeline, RewardConfig};
use crate::seeding::{derive_seed, rng_from, stream};
use crate::td3::{evaluate_policy, ActorPolicy, EvalConfig, EvaluationTable, Policy};

/// Largest dimension the root oracle counts exhaustively.
pub const EXACT_ORACLE_DIM: usize = 3;

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, k) = v.into_iter().fold((0.0, 0usize), |(s, k), x| (s + x, k + 1));
    (k > 0).then(|| s / k as f64)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_else(|| "N/A".into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingStudyConfig {
    pub sizes: Vec<usize>,
    pub systems_per_size: usize,
    pub corrector_steps: usize,
}

impl Default for ScalingStudyConfig {
    fn default() -> Self {
        ScalingStudyConfig { sizes: vec![50], systems_per_size: 50, corrector_steps: 5 }
    }
}

/// One size of the accuracy study. Corrector columns average over systems
/// whose correction succeeded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n: usize,
    pub systems: usize,
    pub failures: usize,
    pub bfgs_time: Option<f64>,
    pub corrector_time: Option<f64>,
    pub bfgs_trace_distance: Option<f64>,
    pub corrected_trace_distance: Option<f64>,
    pub bfgs_summation_distance: Option<f64>,
    pub corrected_summation_distance: Option<f64>,
    pub corrector_success_rate: f64,
}

/// Normalizes `systems_per_size` Gaussian systems of each size, first by BFGS
/// alone and then with the Newton corrector appended.
pub fn reproduce_scaling(cfg: &ScalingStudyConfig, opts: &ScalingOptions, seed: u64) -> Result<Vec<ScalingRow>> {
    if cfg.systems_per_size == 0 || cfg.sizes.is_empty() {
        return Err(Error::Invalid("need at least one size and one system per size".into()));
    }
    if let Some(&n) = cfg.sizes.iter().find(|&&n| !(2..=250).contains(&n)) {
        return Err(Error::Invalid(format!("size {n} is outside 2..=250")));
    }
    let mut rows = Vec::new();
    for &n in &cfg.sizes {
        let mut plain = Vec::new();
        let mut corrected = Vec::new();
        let mut failures = 0;
        for k in 0..cfg.systems_per_size {
            let system = QuadricSystem::random_gaussian(n, 1.0, &mut rng_from(seed, &[stream::GENERATE, n as u64, k as u64]));
            let base = ScalingOptions { corrector_steps: 0, ..opts.clone() };
            let started = Instant::now();
            let ns = match normalize(&system, &base) {
                Ok(ns) => ns,
                Err(e) => {
                    log::warn!("n = {n}, system {k}: {e}");
                    failures += 1;
                    continue;
                }
            };
            let bfgs_time = started.elapsed().as_secs_f64();
            let d = &ns.diagnostics;
            plain.push((bfgs_time, d.trace_distance, d.summation_distance));

            if cfg.corrector_steps > 0 {
                let with = ScalingOptions { corrector_steps: cfg.corrector_steps, ..opts.clone() };
                let started = Instant::now();
                match normalize(&system, &with) {
                    Ok(c) if c.diagnostics.corrector.as_ref().is_some_and(|r| !r.failed) => {
                        corrected.push((started.elapsed().as_secs_f64(), c.diagnostics.trace_distance, c.diagnostics.summation_distance));
                    }
                    Ok(_) => {}
                    Err(e) => log::warn!("n = {n}, system {k}, corrector: {e}"),
                }
            }
        }
        log::info!("n = {n}: {} normalized, {failures} failed", plain.len());
        rows.push(ScalingRow {
            n,
            systems: cfg.systems_per_size,
            failures,
            bfgs_time: mean(plain.iter().map(|p| p.0)),
            corrector_time: mean(corrected.iter().map(|p| p.0)),
            bfgs_trace_distance: mean(plain.iter().map(|p| p.1)),
            corrected_trace_distance: mean(corrected.iter().map(|p| p.1)),
            bfgs_summation_distance: mean(plain.iter().map(|p| p.2)),
            corrected_summation_distance: mean(corrected.iter().map(|p| p.2)),
            corrector_success_rate: if plain.is_empty() { 0.0 } else { corrected.len() as f64 / plain.len() as f64 },
        });
    }
    Ok(rows)
}

/// Columns ending in `_time` are wall-clock measurements.
pub fn write_scaling_csv<W: Write>(rows: &[ScalingRow], mut out: W) -> Result<()> {
    writeln!(
        out,
        "n,systems,failures,bfgs_time,corrector_time,bfgs_trace_distance,corrected_trace_distance,\
         bfgs_summation_distance,corrected_summation_distance,corrector_success_rate"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.n,
            r.systems,
            r.failures,
            cell(r.bfgs_time),
            cell(r.corrector_time),
            cell(r.bfgs_trace_distance),
            cell(r.corrected_trace_distance),
            cell(r.bfgs_summation_distance),
            cell(r.corrected_summation_distance),
            r.corrector_success_rate
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub n: usize,
    pub num_systems: usize,
    pub deltas: Vec<f64>,
    pub num_points: usize,
    pub num_tuples: usize,
    pub epsilon: Option<f64>,
    /// Systems averaged for the top and bottom groups.
    pub group_size: usize,
    /// Accept heuristic oracle counts above the exact range.
    pub heuristic: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            n: 6,
            num_systems: 20,
            deltas: vec![0.01, 0.08],
            num_points: 20_000,
            num_tuples: 500,
            epsilon: None,
            group_size: 5,
            heuristic: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSystem {
    pub index: usize,
    pub true_count: usize,
    pub exhaustive: bool,
    /// One estimate per delta.
    pub estimates: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub delta: f64,
    pub spearman: Option<f64>,
    /// Mean estimate of the systems with the highest true counts.
    pub top_mean: f64,
    pub bottom_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub deltas: Vec<f64>,
    /// Sorted by true count, ties by index.
    pub systems: Vec<SweepSystem>,
    pub summary: Vec<SweepSummary>,
}

/// Labels random Gaussian systems with the oracle and estimates each at every
/// delta under common random numbers.
pub fn delta_sweep(cfg: &SweepConfig, oracle: &OracleOptions, workers: usize, seed: u64) -> Result<SweepResult> {
    if cfg.num_systems == 0 || cfg.deltas.is_empty() {
        return Err(Error::Invalid("need at least one system and one delta".into()));
    }
    if cfg.n > EXACT_ORACLE_DIM && !cfg.heuristic {
        return Err(Error::Refused { dim: cfg.n, max: EXACT_ORACLE_DIM });
    }
    let reward_for = |delta: f64, k: usize| RewardConfig {
        delta,
        num_points: cfg.num_points,
        num_tuples: cfg.num_tuples,
        epsilon: cfg.epsilon,
        seed: derive_seed(seed, &[stream::REWARD, k as u64]),
        workers,
        ..Default::default()
    };
    for &d in &cfg.deltas {
        reward_for(d, 0).validate(cfg.n)?;
    }

    let mut systems = Vec::with_capacity(cfg.num_systems);
    for k in 0..cfg.num_systems {
        let system = QuadricSystem::random_gaussian(cfg.n, 1.0, &mut rng_from(seed, &[stream::GENERATE, k as u64]));
        let opts = OracleOptions { seed: derive_seed(seed, &[stream::ORACLE, k as u64]), workers, ..oracle.clone() };
        let counted = count_real_solutions(&system, &opts)?;
        let estimates = cfg
            .deltas
            .iter()
            .map(|&d| reward_pipeline(&system, &reward_for(d, k)).map(|e| e.value))
            .collect::<Result<Vec<_>>>()?;
        log::info!("system {k}: {} real solutions, estimates {estimates:?}", counted.count);
        systems.push(SweepSystem { index: k, true_count: counted.count, exhaustive: counted.exhaustive, estimates });
    }
    systems.sort_by_key(|s| (s.true_count, s.index));

    let g = cfg.group_size.clamp(1, systems.len());
    let counts: Vec<f64> = systems.iter().map(|s| s.true_count as f64).collect();
    let summary = cfg
        .deltas
        .iter()
        .enumerate()
        .map(|(j, &delta)| {
            let est: Vec<f64> = systems.iter().map(|s| s.estimates[j]).collect();
            SweepSummary {
                delta,
                spearman: spearman(&counts, &est),
                top_mean: mean(est[est.len() - g..].iter().cloned()).unwrap_or(0.0),
                bottom_mean: mean(est[..g].iter().cloned()).unwrap_or(0.0),
            }
        })
        .collect();
    Ok(SweepResult { deltas: cfg.deltas.clone(), systems, summary })
}

impl SweepResult {
    /// Per-system rows; `normalized_*` divides by the largest estimate at that delta.
    pub fn write_systems_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut header = vec!["rank".to_string(), "system".into(), "true_count".into(), "exhaustive".into()];
        for d in &self.deltas {
            header.push(format!("estimate_{d}"));
            header.push(format!("normalized_{d}"));
        }
        writeln!(out, "{}", header.join(","))?;
        let maxima: Vec<f64> = (0..self.deltas.len())
            .map(|j| self.systems.iter().map(|s| s.estimates[j]).fold(0.0, f64::max))
            .collect();
        for (rank, s) in self.systems.iter().enumerate() {
            let mut row = vec![rank.to_string(), s.index.to_string(), s.true_count.to_string(), s.exhaustive.to_string()];
            for (j, e) in s.estimates.iter().enumerate() {
                row.push(format!("{e:e}"));
                row.push(format!("{:e}", if maxima[j] > 0.0 { e / maxima[j] } else { 0.0 }));
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "delta,spearman,top_mean,bottom_mean,top_exceeds_bottom")?;
        for s in &self.summary {
            writeln!(out, "{},{},{:e},{:e},{}", s.delta, cell(s.spearman), s.top_mean, s.bottom_mean, s.top_mean > s.bottom_mean)?;
        }
        Ok(())
    }
}

/// Side-by-side evaluation of a trained agent and the random policy under
/// identical resets and reward seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub agent: EvaluationTable,
    pub random: EvaluationTable,
}

pub fn compare_with_random(agent: &ActorPolicy, env: &EnvConfig, eval: &EvalConfig) -> Result<Comparison> {
    Ok(Comparison {
        agent: evaluate_policy(Policy::Agent(agent), env, eval)?,
        random: evaluate_policy(Policy::Random, env, eval)?,
    })
}

impl Comparison {
    /// `metric,agent,random` rows mirroring the count, exceedance and
    /// steps-to-exceed tables.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "metric,agent,random")?;
        let (a, r) = (&self.agent, &self.random);
        writeln!(out, "mean_reward,{:e},{:e}", a.mean_reward, r.mean_reward)?;
        writeln!(out, "mean_final_reward,{:e},{:e}", a.mean_final_reward, r.mean_final_reward)?;
        writeln!(out, "mean_final_count,{},{}", cell(a.mean_final_count), cell(r.mean_final_count))?;
        writeln!(out, "mean_max_count,{},{}", cell(a.mean_max_count), cell(r.mean_max_count))?;
        for (ta, tr) in a.thresholds.iter().zip(&r.thresholds) {
            writeln!(out, "runs_exceeding_{},{},{}", ta.threshold, ta.runs_exceeding, tr.runs_exceeding)?;
        }
        for (ta, tr) in a.thresholds.iter().zip(&r.thresholds) {
            let med = |m: Option<f64>| m.map(|v| v.to_string()).unwrap_or_else(|| "N/A".into());
            writeln!(out, "median_steps_{},{},{}", ta.threshold, med(ta.median_steps), med(tr.median_steps))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_system_scaling_row() {
        let cfg = ScalingStudyConfig { sizes: vec![5], systems_per_size: 1, corrector_steps: 2 };
        let rows = reproduce_scaling(&cfg, &ScalingOptions::default(), 1).unwrap();
        assert_eq!(rows.len(), 1);
        let r = &rows[0];
        assert_eq!((r.n, r.systems, r.failures), (5, 1, 0));
        assert!(r.bfgs_trace_distance.unwrap() < 1e-6);
        assert!(r.bfgs_summation_distance.unwrap() < 1e-8);
        let mut buf = Vec::new();
        write_scaling_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2);
        assert!(reproduce_scaling(&ScalingStudyConfig { sizes: vec![300], ..cfg }, &ScalingOptions::default(), 1).is_err());
    }

    #[test]
    fn sweep_needs_flag_above_exact_range() {
        let cfg = SweepConfig { n: 4, ..Default::default() };
        let err = delta_sweep(&cfg, &OracleOptions::default(), 1, 0).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn single_delta_single_system() {
        let cfg = SweepConfig { n: 2, num_systems: 1, deltas: vec![0.05], num_points: 200, num_tuples: 20, ..Default::default() };
        let res = delta_sweep(&cfg, &OracleOptions::default(), 1, 3).unwrap();
        assert_eq!(res.systems.len(), 1);
        assert_eq!(res.summary.len(), 1);
        assert_eq!(res.summary[0].spearman, None);
        assert_eq!(res.summary[0].top_mean, res.summary[0].bottom_mean);
        let mut buf = Vec::new();
        res.write_systems_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("rank,system,true_count,exhaustive,estimate_0.05,normalized_0.05\n0,0,"));
    }
}
