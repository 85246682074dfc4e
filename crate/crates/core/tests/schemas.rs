use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fedflow_core::accounting::NodePower;
use fedflow_core::aggregate::BufferPolicy;
use fedflow_core::experiment::{BenchCell, BenchMatrix, ExperimentConfig, ManifestSource, PartitionConfig};
use fedflow_core::workflows::CyclicOrder;
use fedflow_core::{Algorithm, ClassManifest, Normalization, WorkflowKind};
use jsonschema::{Resource, Validator};
use serde_json::Value;

const BASE: &str = "https://fedflow.invalid/schemas/";

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn validator(name: &str) -> Validator {
    let mut opts = jsonschema::options();
    for other in ["manifest", "experiment", "bench"] {
        let doc = read_json(&root().join(format!("schemas/{other}.schema.json")));
        opts = opts.with_resource(format!("{BASE}{other}.schema.json"), Resource::from_contents(doc).unwrap());
    }
    opts.build(&read_json(&root().join(format!("schemas/{name}.schema.json")))).unwrap()
}

fn assert_valid(v: &Validator, doc: &Value, what: &str) {
    let errors: Vec<String> = v.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{what}: {errors:#?}");
}

fn json_files(dir: &str) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(root().join(dir))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no files in {dir}");
    out
}

fn is_bench(p: &Path) -> bool {
    p.file_name().unwrap().to_string_lossy().starts_with("bench_")
}

#[test]
fn schemas_are_valid_json_schema() {
    for name in ["manifest", "experiment", "bench"] {
        let doc = read_json(&root().join(format!("schemas/{name}.schema.json")));
        assert!(jsonschema::meta::is_valid(&doc), "{name}");
    }
}

#[test]
fn recipes_and_manifests_match_their_schemas() {
    let (experiment, bench, manifest) = (validator("experiment"), validator("bench"), validator("manifest"));
    for path in json_files("recipes") {
        let v = if is_bench(&path) { &bench } else { &experiment };
        assert_valid(v, &read_json(&path), &path.display().to_string());
    }
    for path in json_files("manifests") {
        assert_valid(&manifest, &read_json(&path), &path.display().to_string());
    }
}

#[test]
fn every_recipe_loads() {
    for path in json_files("recipes") {
        if is_bench(&path) {
            let m = BenchMatrix::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            m.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        } else {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        }
    }
    for path in json_files("manifests") {
        ClassManifest::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}

fn maximal_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&root().join("recipes/cwt_mu_ka_2c.json")).unwrap();
    cfg.name = Some("maximal".into());
    cfg.notes = vec!["every optional field set".into()];
    cfg.workflow.cyclic_order = Some(CyclicOrder::Fixed(vec!["MU".into(), "KA".into()]));
    cfg.workflow.aggregator.buffer_policy = Some(BufferPolicy::KeepServer);
    cfg.data.partition = Some(PartitionConfig { clients: 2, alpha: Some(0.5) });
    if let ManifestSource::Inline(m) = &mut cfg.data.manifest {
        m.clients.get_mut("KA").unwrap().intensity_offset = 0.25;
        m.notes.push("note".into());
    }
    let node = NodePower { idle_w: 1.0, busy_w: 2.0, joules_per_byte: 0.0 };
    cfg.power.nodes = BTreeMap::from([("MU".to_string(), node)]);
    cfg.centralized_epochs = Some(18.0);
    cfg
}

#[test]
fn schema_covers_every_serialized_config_key() {
    let cfg = maximal_config();
    assert!(matches!(cfg.data.manifest, ManifestSource::Inline(_)), "recipe manifest should be resolved inline");
    let doc = serde_json::to_value(&cfg).unwrap();
    assert_valid(&validator("experiment"), &doc, "maximal experiment");

    let mut random = cfg.clone();
    random.workflow.cyclic_order = Some(CyclicOrder::RandomPerRound(3));
    assert_valid(&validator("experiment"), &serde_json::to_value(&random).unwrap(), "random order");

    let cell = BenchCell {
        name: "all".into(),
        centralized: true,
        kind: Some(WorkflowKind::Swarm),
        algorithm: Some(Algorithm::FedProx),
        cyclic_order: Some(CyclicOrder::RandomPerRound(1)),
        num_rounds: Some(2),
        local_epochs: Some(3),
        prox_mu: Some(0.1),
        server_lr: Some(0.5),
        server_momentum: Some(0.5),
        buffer_policy: Some(BufferPolicy::WeightedAverage),
        normalization: Some(Normalization::BatchStats),
        partition: Some(PartitionConfig { clients: 3, alpha: None }),
    };
    let matrix = serde_json::json!({
        "base": doc,
        "cells": [cell],
        "repeats": 2,
        "baseline": "all",
        "force": true
    });
    assert_valid(&validator("bench"), &matrix, "maximal bench");
    let _: BenchMatrix = serde_json::from_value(matrix).unwrap();
}

#[test]
fn schema_and_loader_agree_on_unknown_keys() {
    let mut doc = serde_json::to_value(maximal_config()).unwrap();
    doc["workflow"]["local"]["momentum"] = 0.9.into();
    assert!(!validator("experiment").is_valid(&doc));
    assert!(ExperimentConfig::from_json(&doc.to_string()).is_err());

    let mut doc = serde_json::to_value(maximal_config()).unwrap();
    doc["workflow"]["kind"] = "Ring".into();
    assert!(!validator("experiment").is_valid(&doc));
    assert!(ExperimentConfig::from_json(&doc.to_string()).is_err());
}
