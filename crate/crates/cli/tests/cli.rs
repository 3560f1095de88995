use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
dt = 0.01
n_cycles = 6
true_r = 0.5
n_particles = 10
q0 = 1.0
seed = 3
repetitions = 2
record_timing = false

[model]
kind = "lorenz63"

[true_q]
kind = "scaled_identity"
variance = 0.3

[filter]
kind = "enkf"

[estimator]
kind = "oss"
"#;

fn covest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covest"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let line = stderr
        .lines()
        .find_map(|l| l.strip_prefix("error: "))
        .unwrap_or_else(|| panic!("no error line in {stderr:?}"));
    serde_json::from_str(line).expect("error line is JSON")
}

#[test]
fn run_writes_outputs_and_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let out_dir = dir.path().join("out");
    let out = covest(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap(), "--reps", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<serde_json::Value> = stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 1);
    assert!(lines[0]["qdiag_mean"].as_f64().unwrap() > 0.0);
    assert!(out_dir.join("rep_0.csv").exists());
    assert!(out_dir.join("rep_0_matrices.json").exists());
}

#[test]
fn json_and_toml_configs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let toml_cfg = write_config(dir.path(), "tiny.toml", TINY);
    let value: toml::Value = toml::from_str(TINY).unwrap();
    let json_cfg = write_config(dir.path(), "tiny.json", &serde_json::to_string(&value).unwrap());
    let run = |cfg: &str, sub: &str| {
        let out = covest(&["run", "--config", cfg, "--out", dir.path().join(sub).to_str().unwrap()]);
        assert!(out.status.success());
        out.stdout
    };
    assert_eq!(run(&toml_cfg, "a"), run(&json_cfg, "b"));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &format!("colour = 1\n{TINY}"));
    let out = covest(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_line(&out);
    assert_eq!(err["kind"], "config");
    assert!(err["message"].as_str().unwrap().contains("colour"));
}

#[test]
fn missing_config_file_fails() {
    let out = covest(&["reference-q", "--config", "/nonexistent/covest.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_line(&out)["kind"].is_string());
}

#[test]
fn usage_errors_exit_with_two() {
    let out = covest(&["run"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["kind"], "usage");
}

#[test]
fn reference_q_rejects_one_scale_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let out = covest(&["reference-q", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["kind"], "config");
}

#[test]
fn loglik_surface_prints_every_node() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let out = covest(&["loglik-surface", "--config", &cfg, "--qgrid", "0.1:0.5:3", "--rgrid", "0.5:0.5:1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = stdout.lines().collect();
    assert_eq!(rows[0], "sigma_q2,sigma_r2,loglik,rmse");
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("0.1,0.5,"));
}

#[test]
fn bad_grid_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let out = covest(&["loglik-surface", "--config", &cfg, "--qgrid", "0.1:0.5", "--rgrid", "0.5:0.5:1"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["kind"], "config");
}
