use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pfsearch::baseline::BaselineReport;
use pfsearch::harness::experiments::{compare_with_random, delta_sweep, reproduce_scaling, write_scaling_csv};
use pfsearch::harness::plot::{line_chart, Series};
use pfsearch::harness::{
    artifact_json, load_config, read_payload, thread_budget, ExperimentConfig, Meta, RunDir, EVAL_REQUIRED,
    TRAIN_REQUIRED,
};
use pfsearch::normalization::{normalize, ScalingOptions};
use pfsearch::oracle::{count_real_solutions, OracleOptions};
use pfsearch::power_flow::{build_system, PowerNetwork};
use pfsearch::quadric::QuadricSystem;
use pfsearch::reward::{reward_pipeline, RewardConfig};
use pfsearch::seeding::{rng_from, stream};
use pfsearch::td3::train::Checkpoint;
use pfsearch::td3::{train_with, ActorPolicy};
use pfsearch::{Error, Result};

/// Point counts requested by `--paper-scale`.
const FULL_SCALE_POINTS: usize = 100_000;
const FULL_SCALE_TUPLES: usize = 2500;

#[derive(Parser)]
#[command(name = "pfsearch", version, about = "Quadric systems with many real solutions")]
struct Cli {
    /// Worker threads; defaults to $PFSEARCH_THREADS, then 1.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Gaussian,
    Uniform,
    PowerFlow,
}

#[derive(Args)]
struct Output {
    /// Write the JSON artifact here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Experiment {
    /// JSON experiment config; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parent of `<id>/<timestamp>/` run directories.
    #[arg(long)]
    runs_dir: Option<PathBuf>,
    /// Write into exactly this directory instead.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    id: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also emit SVG charts.
    #[arg(long)]
    svg: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Random quadric system.
    Generate {
        #[arg(long, value_enum)]
        kind: Kind,
        /// Dimension; node count for power-flow systems is n / 2.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0.3)]
        edge_prob: f64,
        #[command(flatten)]
        output: Output,
    },
    /// Random connected network with injections.
    GenerateNetwork {
        #[arg(long)]
        nodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.3)]
        edge_prob: f64,
        #[command(flatten)]
        output: Output,
    },
    /// Definite quadric system from a network file.
    BuildSystem {
        #[arg(long)]
        network: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        output: Output,
    },
    /// Log-det scaling to trace-normalized form.
    Normalize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        max_iterations: Option<usize>,
        #[arg(long)]
        corrector_steps: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Monte-Carlo estimate of the expected real solution count.
    Reward {
        #[arg(long)]
        system: PathBuf,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        tuples: Option<usize>,
        /// Annulus tolerance or `auto`.
        #[arg(long)]
        eps: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        /// Accumulate in linear rather than log space.
        #[arg(long)]
        linear: bool,
        #[arg(long)]
        paper_scale: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Real solution count by multi-start Newton.
    Count {
        #[arg(long)]
        system: PathBuf,
        #[arg(long)]
        starts: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_dim: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        count_only: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Closed-form Gaussian averages.
    Baseline {
        #[arg(long)]
        n: usize,
        #[command(flatten)]
        output: Output,
    },
    /// Oracle-labelled systems estimated at several deltas.
    DeltaSweep {
        #[command(flatten)]
        exp: Experiment,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        systems: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        deltas: Option<Vec<f64>>,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        tuples: Option<usize>,
        /// Accept heuristic root counts above n = 3.
        #[arg(long)]
        heuristic: bool,
        #[arg(long)]
        paper_scale: bool,
    },
    /// Normalization accuracy and timing per size.
    ReproduceScaling {
        #[command(flatten)]
        exp: Experiment,
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        systems: Option<usize>,
        #[arg(long)]
        corrector_steps: Option<usize>,
    },
    /// TD3 search over perturbations of a random system.
    Train {
        #[command(flatten)]
        exp: Experiment,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Trained agent against the random policy.
    Evaluate {
        #[command(flatten)]
        exp: Experiment,
        /// Checkpoint written by `train`.
        #[arg(long)]
        agent: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Count real solutions of every visited state.
        #[arg(long)]
        oracle: bool,
    },
}

fn emit<C: Serialize, T: Serialize>(output: &Output, command: &str, seed: u64, config: &C, data: &T) -> Result<()> {
    let text = artifact_json(&Meta::new(command, seed, config)?, data)?;
    match &output.out {
        Some(p) => fs::write(p, text)?,
        None => say(&text)?,
    }
    Ok(())
}

/// Writes to stdout; a closed pipe (`| head`) ends output quietly.
fn say(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn optional_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => load_config(p, &[]),
        None => Ok(ExperimentConfig::default()),
    }
}

fn with_preamble(meta: &Meta, body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<String> {
    let mut buf = meta.csv_preamble().into_bytes();
    body(&mut buf)?;
    Ok(String::from_utf8(buf).expect("csv is utf-8"))
}

fn open_run(exp: &Experiment, cfg: &ExperimentConfig) -> Result<RunDir> {
    match &exp.out_dir {
        Some(d) => RunDir::create(d, &cfg.id, true),
        None => RunDir::create(exp.runs_dir.as_deref().unwrap_or(&cfg.output_dir), &cfg.id, false),
    }
}

fn experiment_config(exp: &Experiment, required: &[&str]) -> Result<ExperimentConfig> {
    let mut cfg = match &exp.config {
        Some(p) => load_config(p, required)?,
        None if required.is_empty() => ExperimentConfig::default(),
        None => return Err(Error::MissingField("--config".into())),
    };
    if let Some(id) = &exp.id {
        cfg.id = id.clone();
    }
    if let Some(s) = exp.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let threads = |flag: Option<usize>, cfg: Option<usize>| thread_budget(flag.or(cli.threads).or(cfg));
    match &cli.command {
        Command::Generate { kind, n, seed, sigma, edge_prob, output } => {
            let mut rng = rng_from(*seed, &[stream::GENERATE]);
            let system = match kind {
                Kind::Gaussian => QuadricSystem::random_gaussian(*n, *sigma, &mut rng),
                Kind::Uniform => QuadricSystem::random_uniform(*n, &mut rng),
                Kind::PowerFlow => {
                    if n % 2 != 0 || *n < 4 {
                        return Err(Error::Invalid("power-flow systems have even dimension n >= 4".into()));
                    }
                    build_system(&PowerNetwork::random(n / 2, *edge_prob, &mut rng)?, &mut rng)?
                }
            };
            let kind_name = match kind {
                Kind::Gaussian => "gaussian",
                Kind::Uniform => "uniform",
                Kind::PowerFlow => "power-flow",
            };
            let config = serde_json::json!({"kind": kind_name, "n": n, "sigma": sigma, "edge_prob": edge_prob});
            emit(output, "generate", *seed, &config, &system)
        }
        Command::GenerateNetwork { nodes, seed, edge_prob, output } => {
            let net = PowerNetwork::random(*nodes, *edge_prob, &mut rng_from(*seed, &[stream::GENERATE]))?;
            emit(output, "generate-network", *seed, &serde_json::json!({"nodes": nodes, "edge_prob": edge_prob}), &net)
        }
        Command::BuildSystem { network, seed, output } => {
            let net: PowerNetwork = read_payload(network)?;
            let system = build_system(&net, &mut rng_from(*seed, &[stream::GENERATE]))?;
            emit(output, "build-system", *seed, &serde_json::json!({"network": network}), &system)
        }
        Command::Normalize { input, tol, max_iterations, corrector_steps, config, output } => {
            let system: QuadricSystem = read_payload(input)?;
            let mut opts: ScalingOptions = optional_config(config)?.scaling;
            if let Some(t) = tol {
                opts.gradient_tolerance = *t;
            }
            if let Some(m) = max_iterations {
                opts.max_iterations = *m;
            }
            if let Some(k) = corrector_steps {
                opts.corrector_steps = *k;
            }
            let ns = normalize(&system, &opts)?;
            emit(output, "normalize", 0, &opts, &ns)
        }
        Command::Reward { system, delta, points, tuples, eps, seed, workers, linear, paper_scale, config, output } => {
            let exp = optional_config(config)?;
            let sys: QuadricSystem = read_payload(system)?;
            let mut cfg: RewardConfig = exp.reward.clone();
            if *paper_scale {
                cfg.num_points = FULL_SCALE_POINTS;
                cfg.num_tuples = FULL_SCALE_TUPLES;
            }
            if let Some(d) = delta {
                cfg.delta = *d;
            }
            if let Some(p) = points {
                cfg.num_points = *p;
            }
            if let Some(t) = tuples {
                cfg.num_tuples = *t;
            }
            match eps.as_deref() {
                None => {}
                Some("auto") => cfg.epsilon = None,
                Some(v) => cfg.epsilon = Some(v.parse().map_err(|_| Error::Invalid(format!("--eps {v} is not a number")))?),
            }
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            if *linear {
                cfg.log_space = false;
            }
            cfg.workers = threads(*workers, exp.threads)?;
            for w in cfg.validate(sys.dim())? {
                log::warn!("{w}");
            }
            let est = reward_pipeline(&sys, &cfg)?;
            // Worker count does not change the estimate, so it stays out of the header.
            let header = RewardConfig { workers: 1, ..cfg.clone() };
            emit(output, "reward", cfg.seed, &header, &est)
        }
        Command::Count { system, starts, seed, max_dim, workers, count_only, config, output } => {
            let exp = optional_config(config)?;
            let sys: QuadricSystem = read_payload(system)?;
            let mut opts: OracleOptions = exp.oracle.clone();
            if starts.is_some() {
                opts.starts = *starts;
            }
            if let Some(s) = seed {
                opts.seed = *s;
            }
            if let Some(m) = max_dim {
                opts.max_dim = *m;
            }
            opts.workers = threads(*workers, exp.threads)?;
            let mut res = count_real_solutions(&sys, &opts)?;
            if *count_only {
                res.solutions.clear();
            }
            let header = OracleOptions { workers: 1, ..opts.clone() };
            emit(output, "count", opts.seed, &serde_json::json!({"oracle": header, "count_only": count_only}), &res)
        }
        Command::Baseline { n, output } => {
            emit(output, "baseline", 0, &serde_json::json!({"n": n}), &BaselineReport::new(*n)?)
        }
        Command::DeltaSweep { exp, n, systems, deltas, points, tuples, heuristic, paper_scale } => {
            let mut cfg = experiment_config(exp, &[])?;
            let sw = &mut cfg.sweep;
            if *paper_scale {
                sw.num_points = FULL_SCALE_POINTS;
                sw.num_tuples = FULL_SCALE_TUPLES;
            }
            if let Some(v) = n {
                sw.n = *v;
            }
            if let Some(v) = systems {
                sw.num_systems = *v;
            }
            if let Some(v) = deltas {
                sw.deltas = v.clone();
            }
            if let Some(v) = points {
                sw.num_points = *v;
            }
            if let Some(v) = tuples {
                sw.num_tuples = *v;
            }
            sw.heuristic |= *heuristic;
            let workers = threads(None, cfg.threads)?;
            let res = match delta_sweep(&cfg.sweep, &cfg.oracle, workers, cfg.seed) {
                Err(e @ Error::Refused { .. }) => {
                    eprintln!("hint: counts above n = 3 are heuristic; rerun with --heuristic to accept them");
                    return Err(e);
                }
                other => other?,
            };
            let dir = open_run(exp, &cfg)?;
            let meta = Meta::new("delta-sweep", cfg.seed, &header_config(&cfg))?;
            dir.write("config.json", &artifact_json(&meta, &header_config(&cfg))?)?;
            dir.write("tables/sweep.csv", &with_preamble(&meta, |b| res.write_systems_csv(b))?)?;
            dir.write("tables/summary.csv", &with_preamble(&meta, |b| res.write_summary_csv(b))?)?;
            dir.write("tables/sweep.json", &artifact_json(&meta, &res)?)?;
            if exp.svg {
                let labels: Vec<String> = res.deltas.iter().map(|d| format!("delta {d}")).collect();
                let series: Vec<Series> = labels
                    .iter()
                    .enumerate()
                    .map(|(j, label)| {
                        let max = res.systems.iter().map(|s| s.estimates[j]).fold(f64::MIN_POSITIVE, f64::max);
                        let points = res.systems.iter().enumerate().map(|(r, s)| (r as f64, s.estimates[j] / max)).collect();
                        Series { label, points }
                    })
                    .collect();
                dir.write("tables/sweep.svg", &line_chart("Normalized estimate by true-count rank", "rank", "estimate", &series))?;
            }
            for s in &res.summary {
                say(&format!(
                    "delta {}: spearman {}, top {:.4e}, bottom {:.4e}\n",
                    s.delta,
                    s.spearman.map(|v| format!("{v:.3}")).unwrap_or_else(|| "N/A".into()),
                    s.top_mean,
                    s.bottom_mean
                ))?;
            }
            say(&format!("{}\n", dir.root.display()))?;
            Ok(())
        }
        Command::ReproduceScaling { exp, sizes, systems, corrector_steps } => {
            let mut cfg = experiment_config(exp, &[])?;
            if let Some(v) = sizes {
                cfg.scaling_study.sizes = v.clone();
            }
            if let Some(v) = systems {
                cfg.scaling_study.systems_per_size = *v;
            }
            if let Some(v) = corrector_steps {
                cfg.scaling_study.corrector_steps = *v;
            }
            let rows = reproduce_scaling(&cfg.scaling_study, &cfg.scaling, cfg.seed)?;
            let dir = open_run(exp, &cfg)?;
            let meta = Meta::new("reproduce-scaling", cfg.seed, &header_config(&cfg))?;
            dir.write("config.json", &artifact_json(&meta, &header_config(&cfg))?)?;
            let table = with_preamble(&meta, |b| write_scaling_csv(&rows, b))?;
            dir.write("tables/scaling.csv", &table)?;
            let body: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
            say(&format!("{}\n{}\n", body.join("\n"), dir.root.display()))?;
            Ok(())
        }
        Command::Train { exp, steps, resume } => {
            let mut cfg = experiment_config(exp, TRAIN_REQUIRED)?;
            if let Some(s) = steps {
                cfg.train.total_steps = *s;
            }
            cfg.train.seed = cfg.seed;
            cfg.env.seed = cfg.seed;
            cfg.env.reward.workers = threads(None, cfg.threads)?;
            let resume = resume.as_deref().map(Checkpoint::load).transpose()?;
            let dir = open_run(exp, &cfg)?;
            let meta = Meta::new("train", cfg.seed, &header_config(&cfg))?;
            dir.write("config.json", &artifact_json(&meta, &header_config(&cfg))?)?;
            let ckpt_dir = dir.path("checkpoints");
            let done = train_with(&cfg.env, &cfg.train, resume, &mut |c| {
                c.save(&ckpt_dir.join(format!("step-{}.json", c.next_step)))?;
                c.save(&ckpt_dir.join("latest.json"))
            })?;
            let log = &done.log;
            dir.write("logs/training.csv", &with_preamble(&meta, |b| log.write_csv(b))?)?;
            dir.write("agent.json", &artifact_json(&meta, &done.agent.policy())?)?;
            if cfg.train.checkpoint_every > 0 {
                done.save(&ckpt_dir.join("latest.json"))?;
            }
            if exp.svg {
                let points = log.rows.iter().map(|r| (r.step as f64, r.mean_reward)).collect();
                let chart = line_chart("Mean episode reward", "step", "reward", &[Series { label: "agent", points }]);
                dir.write("logs/training.svg", &chart)?;
            }
            say(&format!("{}\n", dir.root.display()))?;
            Ok(())
        }
        Command::Evaluate { exp, agent, runs, steps, oracle } => {
            let mut cfg = experiment_config(exp, EVAL_REQUIRED)?;
            if let Some(r) = runs {
                cfg.eval.runs = *r;
            }
            if let Some(s) = steps {
                cfg.eval.steps = *s;
            }
            cfg.eval.seed = cfg.seed;
            let workers = threads(None, cfg.threads)?;
            if *oracle {
                cfg.eval.oracle = Some(cfg.eval.oracle.clone().unwrap_or_else(|| cfg.oracle.clone()));
            }
            if let Some(o) = cfg.eval.oracle.as_mut() {
                o.workers = workers;
            }
            cfg.env.reward.workers = workers;
            let policy = load_policy(agent)?;
            let cmp = compare_with_random(&policy, &cfg.env, &cfg.eval)?;
            let dir = open_run(exp, &cfg)?;
            let meta = Meta::new("evaluate", cfg.seed, &header_config(&cfg))?;
            dir.write("config.json", &artifact_json(&meta, &header_config(&cfg))?)?;
            let table = with_preamble(&meta, |b| cmp.write_csv(b))?;
            dir.write("tables/evaluation.csv", &table)?;
            dir.write("tables/agent_steps.csv", &with_preamble(&meta, |b| cmp.agent.write_steps_csv(b))?)?;
            dir.write("tables/random_steps.csv", &with_preamble(&meta, |b| cmp.random.write_steps_csv(b))?)?;
            dir.write("tables/evaluation.json", &artifact_json(&meta, &cmp)?)?;
            let body: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
            say(&format!("{}\n{}\n", body.join("\n"), dir.root.display()))?;
            Ok(())
        }
    }
}

/// A policy artifact from `train`, or the actor of any training checkpoint.
fn load_policy(path: &Path) -> Result<ActorPolicy> {
    read_payload::<ActorPolicy>(path).or_else(|_| Ok(read_payload::<Checkpoint>(path)?.agent.policy()))
}

/// Config as recorded in headers: thread counts do not affect results.
fn header_config(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.threads = None;
    c.env.reward.workers = 1;
    if let Some(o) = c.eval.oracle.as_mut() {
        o.workers = 1;
    }
    c
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

