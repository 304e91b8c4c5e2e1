use std::fs;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fieldmachine")).args(args).output().unwrap()
}

const SMALL_MERGE: &str = r#"{
  "protocol": "merge",
  "layout": {
    "subsystems": [
      { "name": "a", "role": "system", "length_um": 5.0, "temperature_nk": 40.0, "profile": "homogeneous" },
      { "name": "b", "role": "bath", "length_um": 5.0, "temperature_nk": 60.0, "profile": "homogeneous" }
    ]
  },
  "params": { "t_merge_ms": 2.0, "t_after_ms": 2.0 },
  "numerics": { "frame_interval_ms": 0.5 }
}"#;

#[test]
fn schema_is_valid_json() {
    let out = bin(&["schema"]);
    assert_eq!(out.status.code(), Some(0));
    let schema: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(schema["additionalProperties"], serde_json::json!(false));
}

#[test]
fn invalid_config_lists_every_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"protocol": "merge", "params": {"t_merge_ms": -1, "speed": 3}}"#).unwrap();
    let out = bin(&["run", path.to_str().unwrap(), "--quiet"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("t_merge_ms"), "{err}");
    assert!(err.contains("speed"), "{err}");
}

#[test]
fn unknown_flag_is_rejected() {
    assert_eq!(bin(&["run", "x.json", "--bogus"]).status.code(), Some(1));
    assert_eq!(bin(&["run", "/nonexistent/config.json"]).status.code(), Some(1));
}

#[test]
fn oracle_mismatch_has_its_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["oracle-check", "--quiet", "--out", dir.path().to_str().unwrap()]);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let pass = summary["pass"].as_bool().unwrap();
    assert_eq!(out.status.code(), Some(if pass { 0 } else { 3 }));
    assert_eq!(summary["oracle_checks"].as_array().unwrap().len(), 4);
}

#[test]
fn run_writes_three_files_and_thins_frames() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("merge.json");
    fs::write(&cfg, SMALL_MERGE).unwrap();
    let full = dir.path().join("full");
    let thin = dir.path().join("thin");
    let out = bin(&["run", cfg.to_str().unwrap(), "--quiet", "--out", full.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = bin(&["run", cfg.to_str().unwrap(), "--quiet", "--frames", "4", "--out", thin.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    for name in ["energy_density.csv", "subsystems.csv", "summary.json"] {
        assert!(full.join(name).is_file(), "{name} missing");
    }
    let rows = |p: &std::path::Path| fs::read_to_string(p.join("energy_density.csv")).unwrap().lines().count() - 1;
    // 9 frames of 20 pixels; every 4th frame keeps 3.
    assert_eq!(rows(&full), 9 * 20);
    assert_eq!(rows(&thin), 3 * 20);
    assert_eq!(fs::read(full.join("subsystems.csv")).unwrap(), fs::read(thin.join("subsystems.csv")).unwrap());
    assert_eq!(bin(&["run", cfg.to_str().unwrap(), "--frames", "0"]).status.code(), Some(1));
}
