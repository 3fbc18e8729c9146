//! Plumbing shared by the command-line tool: artifact headers, configuration
//! files, run directories, and the experiment drivers.

pub mod experiments;
pub mod plot;
pub mod stats;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::normalization::ScalingOptions;
use crate::oracle::OracleOptions;
use crate::reward::RewardConfig;
use crate::td3::{EvalConfig, TrainConfig};
use experiments::{ScalingStudyConfig, SweepConfig};

pub const TOOL: &str = "pfsearch";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Environment variable holding the default worker-thread budget.
pub const THREADS_ENV: &str = "PFSEARCH_THREADS";

/// Header embedded in every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: Value,
}

impl Meta {
    pub fn new<C: Serialize>(command: &str, seed: u64, config: &C) -> Result<Self> {
        Ok(Meta {
            tool: TOOL.into(),
            version: VERSION.into(),
            command: command.into(),
            seed,
            config: serde_json::to_value(config)?,
        })
    }

    /// `#`-prefixed lines placed above CSV headers.
    pub fn csv_preamble(&self) -> String {
        format!(
            "# tool={} version={} command={} seed={}\n# config={}\n",
            self.tool, self.version, self.command, self.seed, self.config
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub meta: Meta,
    pub data: T,
}

/// Pretty JSON of `{meta, data}` with a trailing newline.
pub fn artifact_json<T: Serialize>(meta: &Meta, data: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&Artifact { meta: meta.clone(), data })?;
    s.push('\n');
    Ok(s)
}

/// Reads a JSON payload that is either bare or wrapped as `{meta, data}`.
pub fn read_payload<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Invalid(format!("cannot read {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)?;
    let inner = match value {
        Value::Object(mut m) if m.contains_key("meta") && m.contains_key("data") => m.remove("data").expect("checked"),
        other => other,
    };
    Ok(serde_json::from_value(inner)?)
}

/// Thread budget: explicit flag, then the environment variable, then 1.
pub fn thread_budget(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| Error::Invalid(format!("{THREADS_ENV}={v} is not a thread count")))?,
            Err(_) => 1,
        },
    };
    if n == 0 {
        return Err(Error::Invalid("thread budget must be at least 1".into()));
    }
    Ok(n)
}

/// Everything one experiment needs; every section falls back to its defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub id: String,
    pub seed: u64,
    pub threads: Option<usize>,
    pub output_dir: PathBuf,
    pub scaling: ScalingOptions,
    pub reward: RewardConfig,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub oracle: OracleOptions,
    pub sweep: SweepConfig,
    pub scaling_study: ScalingStudyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            id: "default".into(),
            seed: 0,
            threads: None,
            output_dir: PathBuf::from("runs"),
            scaling: ScalingOptions::default(),
            reward: RewardConfig { num_points: 20_000, num_tuples: 500, ..Default::default() },
            env: EnvConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            oracle: OracleOptions::default(),
            sweep: SweepConfig::default(),
            scaling_study: ScalingStudyConfig::default(),
        }
    }
}

/// Fields a train or evaluate config must spell out.
pub const TRAIN_REQUIRED: &[&str] = &["id", "seed", "env.n", "env.episode_length", "env.action_cap", "train.total_steps"];
pub const EVAL_REQUIRED: &[&str] = &["id", "seed", "env.n", "env.action_cap", "eval.runs", "eval.steps"];

fn lookup<'a>(v: &'a Value, dotted: &str) -> Option<&'a Value> {
    dotted.split('.').try_fold(v, |cur, key| cur.get(key))
}

/// Parses a config, failing with the first absent entry of `required`.
pub fn parse_config(text: &str, required: &[&str]) -> Result<ExperimentConfig> {
    let value: Value = serde_json::from_str(text)?;
    if !value.is_object() {
        return Err(Error::Invalid("config must be a JSON object".into()));
    }
    if let Some(missing) = required.iter().find(|f| lookup(&value, f).is_none()) {
        return Err(Error::MissingField((*missing).into()));
    }
    Ok(serde_json::from_value(value)?)
}

pub fn load_config(path: &Path, required: &[&str]) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Invalid(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text, required)
}

/// An experiment output directory owned by this process until dropped.
#[derive(Debug)]
pub struct RunDir {
    pub root: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    /// `base/<id>/<timestamp>/`, or `base` itself when `exact`.
    pub fn create(base: &Path, id: &str, exact: bool) -> Result<Self> {
        let root = if exact {
            base.to_path_buf()
        } else {
            let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
            base.join(id).join(format!("{}-{:03}", now.as_secs(), now.subsec_millis()))
        };
        for sub in ["logs", "tables", "systems", "checkpoints"] {
            fs::create_dir_all(root.join(sub))?;
        }
        let lock = root.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                use std::io::Write;
                writeln!(f, "{}", std::process::id())?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Invalid(format!("{} is in use by another process", root.display())));
            }
            Err(e) => return Err(e.into()),
        }
        Ok(RunDir { root, lock })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&self, rel: &str, text: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        fs::write(&p, text)?;
        Ok(p)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}
