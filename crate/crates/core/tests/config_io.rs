use std::fs;
use std::path::Path;

use fieldmachine::cli_io::{parse_config, run, write_outputs, Protocol, RunOutput};
use fieldmachine::protocols::{otto_layout, OttoConfig};

const SMALL_MERGE: &str = r#"{
  "protocol": "merge",
  "layout": {
    "dz_um": 0.5,
    "subsystems": [
      { "name": "a", "role": "system", "length_um": 5.0, "temperature_nk": 40.0, "profile": "homogeneous" },
      { "name": "b", "role": "bath", "length_um": 6.0, "temperature_nk": 60.0, "profile": "homogeneous" }
    ]
  },
  "params": { "t_merge_ms": 2.0, "t_after_ms": 1.0 },
  "numerics": { "frame_interval_ms": 0.5, "diagnostics_interval_ms": 1.0 }
}"#;

fn presets() -> Vec<std::path::PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
    let mut v: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn every_preset_parses() {
    let files = presets();
    assert!(files.len() >= 8);
    for p in files {
        let text = fs::read_to_string(&p).unwrap();
        parse_config(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn otto_preset_matches_the_defaults() {
    let text = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets/otto_fig6.json")).unwrap();
    let cfg = parse_config(&text).unwrap();
    assert_eq!(cfg.protocol, Protocol::Otto(OttoConfig::default()));
    assert_eq!(cfg.layout.unwrap(), otto_layout(cfg.coupling.coupling()));
}

#[test]
fn resolved_config_parses_to_itself() {
    for p in presets() {
        let cfg = parse_config(&fs::read_to_string(&p).unwrap()).unwrap();
        let again = parse_config(&cfg.resolved().to_string()).unwrap();
        assert_eq!(cfg.resolved(), again.resolved(), "{}", p.display());
    }
}

#[test]
fn outputs_are_complete_and_reproducible() {
    let cfg = parse_config(SMALL_MERGE).unwrap();
    let out = run(&cfg).unwrap();
    let RunOutput::Record(rec) = &out else { panic!("merge produces a record") };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_outputs(&cfg, &out, a.path()).unwrap();
    write_outputs(&cfg, &run(&cfg).unwrap(), b.path()).unwrap();
    for name in ["energy_density.csv", "subsystems.csv", "summary.json"] {
        let x = fs::read(a.path().join(name)).unwrap();
        assert_eq!(x, fs::read(b.path().join(name)).unwrap(), "{name} differs between runs");
    }

    let csv = fs::read_to_string(a.path().join("energy_density.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("time_ms,pixel,z_um,energy_rel"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), rec.frames.len() * 22);
    assert_eq!(rec.frames.len(), 7);
    assert!(rows.iter().all(|r| r.len() == 4 && r[3].is_finite()));
    assert_eq!(rows.last().unwrap()[0], 3.0);

    let subs = fs::read_to_string(a.path().join("subsystems.csv")).unwrap();
    let energy: Vec<f64> = subs.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    let totals: Vec<f64> = energy.chunks(2).map(|c| c[0] + c[1]).collect();
    for (f, t) in rec.frames.iter().zip(&totals) {
        let s: f64 = f.subsystems.iter().map(|s| s.energy_j).sum();
        assert_eq!(s, *t);
    }

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"], cfg.resolved());
    assert_eq!(summary["subsystems"], serde_json::json!(["a", "b"]));
}
