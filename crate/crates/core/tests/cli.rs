// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{"pairs_per_emotion":40,"extraction_per_emotion":20,"head_pairs":4,"neuron_pairs":4,
"knockout_pairs":5,"phase_pairs":2,"gate_pairs_per_emotion":10}"#;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emocircuit")).args(args).output().unwrap()
}

fn small_config(dir: &Path, extra: &str) -> String {
    let mut v: serde_json::Value = serde_json::from_str(SMALL).unwrap();
    if !extra.is_empty() {
        let e: serde_json::Value = serde_json::from_str(extra).unwrap();
        for (k, x) in e.as_object().unwrap() {
            v[k] = x.clone();
        }
    }
    let p = dir.join("cfg.json");
    std::fs::write(&p, v.to_string()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(cli(&[]).status.code(), Some(1));
    assert_eq!(cli(&["no-such-stage"]).status.code(), Some(1));
    assert_eq!(cli(&["scan-layers", "--seed", "x"]).status.code(), Some(1));
    assert_eq!(cli(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_input_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("absent.json");
    let o = cli(&["gen-data", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let cfg = small_config(d.path(), r#"{"not_a_field":1}"#);
    assert_eq!(cli(&["gen-data", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn stages_write_run_directory() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path(), "");
    let out = d.path().join("run");
    let out_s = out.to_str().unwrap();
    let o = cli(&["gen-data", "--config", &cfg, "--out", out_s]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.json", "model/weights.emc", "model/plant.json", "data/pairs.jsonl"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let o = cli(&["scan-layers", "--config", &cfg, "--out", out_s]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("scan peaks"));
    assert!(out.join("steering/happy_scan.json").is_file());
}

#[test]
fn unattainable_threshold_exits_3() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path(), r#"{"tau":1.5}"#);
    let out = d.path().join("run");
    let o = cli(&["extract-steering", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
