//! End-to-end tests of the `sdg-lab` binary: exit codes, output files,
//! byte determinism and the seed override.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_sdg-lab")
}

fn run_with(config: &str, dir: &Path, envs: &[(&str, &str)]) -> Output {
    let cfg_path = dir.join("config.json");
    std::fs::write(&cfg_path, config).unwrap();
    let mut cmd = Command::new(bin());
    cmd.arg("run").arg(&cfg_path).arg("--out").arg(dir);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

fn tmp(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("sdg-lab-test-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const VALIDATE_ADDITIVE: &str = r#"{
  "model": { "registry": "additive_drift", "gamma": 2.0 },
  "grid": { "t0": 0.0, "T": 1.0, "n_steps": 10, "m_paths": 100, "seed": 5 },
  "task": { "kind": "validate" }
}"#;

#[test]
fn validate_task_writes_report_and_exits_zero() {
    let dir = tmp("validate");
    let out = run_with(VALIDATE_ADDITIVE, &dir, &[]);
    assert!(out.status.success(), "{out:?}");
    let report: serde_json::Value =
        serde_json::from_str(&read(&dir, "validate_report.json")).unwrap();
    assert_eq!(report["pass"], serde_json::Value::Bool(true));
    assert_eq!(report["_meta"]["seed"], 5);
    assert_eq!(report["_meta"]["seed_source"], "config");
}

#[test]
fn dpp_delta_out_of_range_names_the_field() {
    let dir = tmp("dpp-delta");
    let cfg = r#"{
      "model": { "registry": "frozen" },
      "grid": { "t0": 0.0, "T": 1.0, "n_steps": 10, "m_paths": 100, "seed": 5 },
      "classes": {
        "strategies": [ { "kind": "constant", "value": [0.5] } ],
        "controls": [ { "kind": "constant", "value": [1.0] } ]
      },
      "task": { "kind": "dpp", "x": [0.0], "delta": 1.0, "epsilon": 0.05 }
    }"#;
    let out = run_with(cfg, &dir, &[]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("task.delta"), "stderr: {stderr}");
}

#[test]
fn crossval_heat_passes_with_gap_in_summary() {
    let dir = tmp("crossval");
    let cfg = r#"{
      "model": { "registry": "heat" },
      "grid": { "t0": 0.0, "T": 1.0, "n_steps": 25, "m_paths": 4000, "seed": 7 },
      "classes": {
        "strategies": [ { "kind": "constant", "value": [0.0] } ],
        "controls": [ { "kind": "constant", "value": [0.0] } ]
      },
      "task": {
        "kind": "crossval", "x": 0.5,
        "x_min": -2.0, "x_max": 2.0, "n_x": 81,
        "u_grid": [[0.0]], "v_grid": [[0.0]]
      }
    }"#;
    let out = run_with(cfg, &dir, &[]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "stdout: {stdout}, stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.contains("gap"), "{stdout}");
    let report: serde_json::Value = serde_json::from_str(&read(&dir, "crossval.json")).unwrap();
    assert_eq!(report["pass"], serde_json::Value::Bool(true));
}

#[test]
fn same_config_same_bytes() {
    let dir_a = tmp("det-a");
    let dir_b = tmp("det-b");
    let cfg = r#"{
      "model": { "registry": "mirror" },
      "grid": { "t0": 0.0, "T": 1.0, "n_steps": 8, "m_paths": 500, "seed": 11 },
      "classes": {
        "strategies": [ { "kind": "mirror" }, { "kind": "constant", "value": [1.0] } ],
        "controls": [ { "kind": "lattice", "axes": [[-1.0, 1.0]] } ]
      },
      "task": { "kind": "value", "x_values": [[0.0], [0.5], [1.0]] }
    }"#;
    let out_a = run_with(cfg, &dir_a, &[]);
    let out_b = run_with(cfg, &dir_b, &[]);
    assert!(out_a.status.success() && out_b.status.success());
    assert_eq!(read(&dir_a, "value.csv"), read(&dir_b, "value.csv"));
    let lines = read(&dir_a, "value.csv");
    let rows: Vec<&str> = lines.trim_end().lines().collect();
    assert!(rows[0].starts_with("# seed=11"));
    assert_eq!(rows.len(), 2 + 3); // meta + header + 3 points
}

#[test]
fn env_seed_override_recorded() {
    let dir = tmp("seed-env");
    let out = run_with(VALIDATE_ADDITIVE, &dir, &[("SDG_LAB_SEED", "99")]);
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&read(&dir, "validate_report.json")).unwrap();
    assert_eq!(report["_meta"]["seed"], 99);
    assert_eq!(report["_meta"]["seed_source"], "env");
}

#[test]
fn validate_subcommand_checks_without_running() {
    let dir = tmp("validate-sub");
    let cfg_path = dir.join("config.json");
    std::fs::write(&cfg_path, VALIDATE_ADDITIVE).unwrap();
    let out = Command::new(bin())
        .arg("validate")
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("config OK"));
    // nothing executed, nothing written
    assert!(!dir.join("validate_report.json").exists());
}

#[test]
fn unknown_registry_is_exit_one() {
    let dir = tmp("bad-registry");
    let cfg = r#"{
      "model": { "registry": "not_a_game" },
      "grid": { "t0": 0.0, "T": 1.0, "n_steps": 4, "m_paths": 10, "seed": 1 },
      "task": { "kind": "validate" }
    }"#;
    let out = run_with(cfg, &dir, &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.registry"));
}

#[test]
fn hamiltonian_task_emits_monotone_levels() {
    let dir = tmp("ham");
    let cfg = r#"{
      "model": { "registry": "additive_drift" },
      "grid": { "t0": 0.0, "T": 1.0, "n_steps": 4, "m_paths": 10, "seed": 1 },
      "task": {
        "kind": "hamiltonian",
        "t": 0.2, "x": 0.1, "y": 0.0, "z": 1.0, "gamma_xx": 0.0,
        "which": "H1_upper",
        "anchors": [[-1.0], [0.0], [1.0]],
        "n_max": 8
      }
    }"#;
    let out = run_with(cfg, &dir, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(&dir, "envelope_vs_n.csv");
    let rows: Vec<&str> = csv.trim_end().lines().collect();
    assert_eq!(rows.len(), 2 + 8); // meta + header + one row per level
    let values: Vec<f64> = rows[2..]
        .iter()
        .map(|r| r.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    for w in values.windows(2) {
        assert!(w[1] <= w[0], "upper envelope must be nonincreasing: {values:?}");
    }
}

#[test]
fn pde_task_emits_surface_rows() {
    let dir = tmp("pde");
    let cfg = r#"{
      "model": { "registry": "heat" },
      "grid": { "t0": 0.0, "T": 0.1, "n_steps": 4, "m_paths": 10, "seed": 1 },
      "task": {
        "kind": "pde", "x_min": -1.0, "x_max": 1.0, "n_x": 21,
        "u_grid": [[0.0]], "v_grid": [[0.0]]
      }
    }"#;
    let out = run_with(cfg, &dir, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(&dir, "pde_surface.csv");
    let rows: Vec<&str> = csv.trim_end().lines().collect();
    assert_eq!(rows[1], "t,x,w");
    // (n_t + 1) layers x 21 nodes data rows after meta + header
    assert_eq!((rows.len() - 2) % 21, 0);
}
