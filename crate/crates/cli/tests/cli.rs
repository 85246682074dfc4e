use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn fedflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedflow")).args(args).env("RUST_LOG", "error").output().unwrap()
}

fn recipe(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../recipes").join(name)
}

fn resolved(name: &str) -> Value {
    let out = fedflow(&["validate", recipe(name).to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, v: &Value) -> String {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn validate_only_accepts_every_recipe() {
    for name in ["sg_fedavg_2c.json", "cwt_ka_mu_2c.json", "swarm_fedavg_2c.json", "sg_fedavg_5c.json"] {
        let out = fedflow(&["run", recipe(name).to_str().unwrap(), "--validate-only"]);
        assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).contains("ok"));
    }
}

#[test]
fn invalid_config_exits_2_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = resolved("sg_fedavg_2c.json");
    cfg["workflow"]["local"]["batch_size"] = json!(0);
    let path = write(dir.path(), "bad.json", &cfg);
    let out = fedflow(&["run", &path]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_size"));

    cfg["workflow"]["local"]["batch_size"] = json!(8);
    cfg["workflow"]["local"]["momentum"] = json!(0.9);
    let path = write(dir.path(), "unknown.json", &cfg);
    assert_eq!(fedflow(&["validate", &path]).status.code(), Some(2));
}

#[test]
fn bench_budget_mismatch_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let base = resolved("sg_fedavg_2c.json");
    let matrix = json!({
        "base": base,
        "cells": [{ "name": "short", "local_epochs": 5 }],
        "repeats": 1
    });
    let path = write(dir.path(), "matrix.json", &matrix);
    let out = fedflow(&["bench", &path]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_config_file_is_an_io_failure() {
    let out = fedflow(&["run", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(6));
}
