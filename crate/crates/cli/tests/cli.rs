//! End-to-end checks of the `sse` binary: exit codes, determinism of the
//! emitted CSV, and the documented subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sse"))
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path
}

fn small_prediction_config(dir: &Path) -> PathBuf {
    write_config(
        dir,
        r#"{
  "system": {"a": [[1.0]], "c": [[1.0], [1.0], [1.0]], "sigma_w": 1.0, "sigma_v": 1.0},
  "k": 1,
  "mode": "prediction",
  "attack": {"strategy": "zero_out", "attacked_set": [0]},
  "window": {"n": 2000, "epsilon": {"relative": 0.1}, "burn_in": 200},
  "trials": 3,
  "seed": 11,
  "min_pass_fraction": 0.0
}"#,
    )
}

fn run_ok(output: &Output) {
    assert!(
        output.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn run_is_deterministic_across_parallelism() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_prediction_config(dir.path());

    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    for (out, threads) in [(&out1, "1"), (&out2, "4")] {
        let output = bin()
            .args(["run", "--config"])
            .arg(&config)
            .args(["--parallel", threads, "--out"])
            .arg(out)
            .output()
            .unwrap();
        run_ok(&output);
    }
    let csv1 = fs::read(out1.join("results.csv")).unwrap();
    let csv2 = fs::read(out2.join("results.csv")).unwrap();
    assert!(!csv1.is_empty());
    assert_eq!(csv1, csv2);
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_prediction_config(dir.path());
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    for (out, seed) in [(&out1, "1"), (&out2, "2")] {
        let output = bin()
            .args(["run", "--config"])
            .arg(&config)
            .args(["--seed", seed, "--out"])
            .arg(out)
            .output()
            .unwrap();
        run_ok(&output);
    }
    let csv1 = fs::read(out1.join("results.csv")).unwrap();
    let csv2 = fs::read(out2.join("results.csv")).unwrap();
    assert_ne!(csv1, csv2);
}

#[test]
fn bad_config_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{
  "system": {"a": [[1.0, 2.0]], "c": [[1.0]], "sigma_w": 1.0, "sigma_v": 1.0},
  "k": 0, "mode": "prediction"
}"#,
    );
    let output = bin()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("system.a[0]"), "stderr: {stderr}");
}

#[test]
fn sparse_condition_violation_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{
  "system": {
    "a": [[1.0, 0.0], [0.0, 1.0]],
    "c": [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, -1.0], [1.0, 2.0]],
    "sigma_w": 1.0, "sigma_v": 1.0
  },
  "k": 2, "mode": "prediction",
  "window": {"n": 500, "epsilon": {"relative": 0.1}, "burn_in": 100},
  "trials": 1, "seed": 1
}"#,
    );
    let output = bin()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("sparse observability"), "stderr: {stderr}");
}

#[test]
fn report_observability_prints_the_indices() {
    let dir = tempfile::tempdir().unwrap();
    let output = bin()
        .args(["report-observability", "--config"])
        .arg(repo_config("observability_report.json"))
        .args(["--format", "json", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    run_ok(&output);
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("theta = 2"), "stdout: {stdout}");
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("results.json")).unwrap())
            .unwrap();
    assert_eq!(json["observability"]["theta"], 2);
    assert_eq!(json["observability"]["max_correctable"], 1);
    assert_eq!(json["observability"]["max_detectable"], 3);
    assert_eq!(json["observability"]["min_hamming_distance"], 4);
}

#[test]
fn decode_noiseless_recovers_the_state() {
    let dir = tempfile::tempdir().unwrap();
    let output = bin()
        .args(["decode-noiseless", "--config"])
        .arg(repo_config("noiseless_decode.json"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    run_ok(&output);
    let text = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "trial,seed,attacked_set,selected_set,mse,bound,pass,decode_status"
    );
    for line in lines {
        assert!(line.ends_with(",true,unique"), "row: {line}");
    }
}

#[test]
fn compare_oracle_emits_extended_columns() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{
  "system": {"a": [[1.0]], "c": [[1.0], [1.0], [1.0]], "sigma_w": 1.0, "sigma_v": 1.0},
  "k": 1,
  "mode": "prediction",
  "attack": {"strategy": "zero_out", "attacked_set": [0]},
  "window": {"n": 4000, "epsilon": {"relative": 0.1}, "burn_in": 200},
  "trials": 2,
  "seed": 3,
  "min_pass_fraction": 0.0
}"#,
    );
    let output = bin()
        .args(["compare-oracle", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    run_ok(&output);
    let text = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert!(text.starts_with(
        "trial,seed,attacked_set,selected_set,mse,bound,pass,oracle_mse,opt_good"
    ));
}
