use std::path::Path;
use std::process::{Command, Output};

use nalgebra::{DMatrix, DVector};
use pfsearch::quadric::QuadricSystem;
use serde_json::Value;

fn pfsearch(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pfsearch")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn data(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["meta"]["tool"], "pfsearch");
    v["data"].clone()
}

#[test]
fn baseline_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(&pfsearch(&["baseline", "--n", "10"], dir.path()));
    assert!((d["expected_count"].as_f64().unwrap() - 13.3118).abs() < 1e-3);
}

#[test]
fn counts_four_solutions_of_diagonal_pair() {
    let dir = tempfile::tempdir().unwrap();
    let sys = QuadricSystem::new(
        vec![DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0])), DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]))],
        vec![1.0, 1.0],
    )
    .unwrap();
    std::fs::write(dir.path().join("sys.json"), serde_json::to_string(&sys).unwrap()).unwrap();
    let d = data(&pfsearch(&["count", "--system", "sys.json", "--seed", "1"], dir.path()));
    assert_eq!(d["count"], 4);
    for root in d["solutions"].as_array().unwrap() {
        for v in root.as_array().unwrap() {
            assert!((v.as_f64().unwrap().abs() - 0.2f64.sqrt()).abs() < 1e-9);
        }
    }
}

#[test]
fn generate_is_reproducible_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str| pfsearch(&["generate", "--kind", "gaussian", "--n", "5", "--seed", seed], dir.path()).stdout;
    assert_eq!(run("3"), run("3"));
    assert_ne!(run("3"), run("4"));
}

#[test]
fn generated_system_feeds_normalize_and_reward() {
    let dir = tempfile::tempdir().unwrap();
    assert!(pfsearch(&["generate", "--kind", "uniform", "--n", "3", "--seed", "2", "--out", "s.json"], dir.path()).status.success());
    let norm = data(&pfsearch(&["normalize", "--in", "s.json"], dir.path()));
    assert!(norm["diagnostics"]["trace_distance"].as_f64().unwrap() < 1e-6);
    let reward = data(&pfsearch(&["reward", "--system", "s.json", "--points", "500", "--tuples", "20"], dir.path()));
    assert!(reward["value"].as_f64().unwrap() >= 0.0);
}

#[test]
fn missing_required_field_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"id": "x", "seed": 1, "env": {"n": 3, "episode_length": 5}}"#).unwrap();
    let out = pfsearch(&["train", "--config", "c.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("env.action_cap"));
}

#[test]
fn sweep_above_exact_dimension_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"id": "x", "seed": 1, "sweep": {"n": 5, "num_systems": 2}}"#).unwrap();
    let out = pfsearch(&["delta-sweep", "--config", "c.json"], dir.path());
    assert_eq!(out.status.code(), Some(4));
}
