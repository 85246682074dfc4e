use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::info;

use super::{ExperimentConfig, ExperimentError, Result};
use crate::accounting::RunSummary;
use crate::aggregate::Algorithm;
use crate::data::{equal_partition, generate, split_train_test, SynthImage};
use crate::metrics::MetricReport;
use crate::models::{Model, SegNet};
use crate::seed::{derive_seed, name_tag};
use crate::transport::Endpoint;
use crate::workflows::{
    self, client_seed, join, ClientAgent, ClientData, Coordinator, CoordinatorOptions, RunOptions, RunOutput,
    WorkflowKind, COORDINATOR,
};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "model.ffps";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const SUMMARY_FILE: &str = "summary.json";

fn model_seed(cfg: &ExperimentConfig) -> u64 {
    derive_seed(cfg.seed, &[name_tag("model")])
}

/// Every client's train/test split, in registration order.
pub fn client_data(cfg: &ExperimentConfig) -> Result<Vec<ClientData<SynthImage>>> {
    let manifest = cfg.manifest()?;
    let datasets = generate(manifest, &cfg.data.generator, derive_seed(cfg.seed, &[name_tag("data")]))?;
    let shards: Vec<(String, Vec<SynthImage>)> = match cfg.data.partition {
        None => datasets.into_iter().collect(),
        Some(p) => {
            let pooled: Vec<SynthImage> = datasets.into_values().flatten().collect();
            let labels: Vec<usize> = pooled.iter().map(|im| im.dominant_class(manifest.num_labels())).collect();
            let skew = p.alpha.map(|a| (labels.as_slice(), a));
            let parts = equal_partition(&pooled, p.clients, derive_seed(cfg.seed, &[name_tag("partition")]), skew)?;
            cfg.client_ids()?.into_iter().zip(parts).collect()
        }
    };
    shards
        .into_iter()
        .map(|(id, images)| {
            let split_seed = derive_seed(cfg.seed, &[name_tag("split"), name_tag(&id)]);
            let (train, test) = split_train_test(&images, cfg.data.train_fraction, split_seed)?;
            Ok(ClientData { seed: client_seed(cfg.seed, &id), id, train, test })
        })
        .collect()
}

fn setup(cfg: &ExperimentConfig) -> Result<(SegNet, serde_json::Value)> {
    cfg.validate()?;
    Ok((SegNet::new(cfg.model.clone())?, serde_json::to_value(cfg)?))
}

/// Runs coordinator and clients as threads of this process.
pub fn run_in_process(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let (model, snapshot) = setup(cfg)?;
    let clients = client_data(cfg)?;
    let opts = RunOptions {
        link: cfg.link,
        round_timeout: cfg.round_timeout(),
        final_eval: cfg.final_eval,
        power: cfg.power.clone(),
        model_seed: model_seed(cfg),
        fail_aggregation: None,
        trace: false,
        setup_config: Some(snapshot),
    };
    Ok(workflows::run_in_process(&cfg.workflow, &model, &clients, &opts)?.output)
}

/// Runs the coordinator on `ep`; clients join from elsewhere via [`serve_client`].
pub fn run_with_endpoint(cfg: &ExperimentConfig, ep: &dyn Endpoint) -> Result<RunOutput> {
    let (model, snapshot) = setup(cfg)?;
    let opts = CoordinatorOptions {
        round_timeout: cfg.round_timeout(),
        final_eval: cfg.final_eval,
        power: cfg.power.clone(),
        setup_config: Some(snapshot),
    };
    let init = model.init_params(model_seed(cfg));
    Ok(Coordinator::new(ep, cfg.workflow.clone(), cfg.client_ids()?, init, opts).run()?)
}

/// Joins a coordinator, rebuilds this client's data from the shipped
/// configuration and serves until the run ends.
pub fn serve_client(ep: &dyn Endpoint, coordinator_addr: Option<&str>, timeout: Duration) -> Result<()> {
    let session = join(ep, COORDINATOR, coordinator_addr, timeout)?;
    let snapshot = session
        .config
        .clone()
        .ok_or_else(|| ExperimentError::invalid("<setup>", "coordinator sent no configuration"))?;
    let cfg: ExperimentConfig = serde_json::from_value(snapshot)?;
    let (model, _) = setup(&cfg)?;
    let data = client_data(&cfg)?
        .into_iter()
        .find(|c| c.id == ep.id())
        .ok_or_else(|| ExperimentError::invalid("<setup>", format!("no data for client `{}`", ep.id())))?;
    let agent = ClientAgent {
        id: data.id.clone(),
        model: &model,
        train: &data.train,
        test: &data.test,
        seed: data.seed,
        model_seed: model_seed(&cfg),
        cfg: cfg.workflow.clone(),
        idle_timeout: cfg.round_timeout() * 3,
        skip_aggregation_round: None,
    };
    agent.serve(session)?;
    Ok(())
}

/// One line of the metrics log. Holds only seed-determined values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    /// `None` marks the evaluation of the final model.
    pub round: Option<u32>,
    pub client: String,
    pub num_samples: u64,
    pub train_loss: f64,
    pub steps: u64,
    pub eval_loss: Option<f64>,
    pub eval_samples: Option<usize>,
    pub metrics: Option<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: Option<String>,
    pub workflow: WorkflowKind,
    pub algorithm: Algorithm,
    pub num_rounds: u32,
    pub clients: Vec<String>,
    pub seed: u64,
    pub epoch_budget: f64,
    pub centralized_epochs: Option<f64>,
    pub budget_warning: Option<String>,
    pub checkpoint_sha256: String,
    pub overall: Option<MetricReport>,
    pub aggregators: Vec<String>,
    pub orders: Vec<Vec<String>>,
    pub ledger: RunSummary,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub output: RunOutput,
    pub summary: ExperimentSummary,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| ExperimentError::io(path, e))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the config snapshot, checkpoint, metrics log, ledger and summary into `dir`.
pub fn write_artifacts(cfg: &ExperimentConfig, output: &RunOutput, dir: &Path) -> Result<ExperimentSummary> {
    fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    write(&dir.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)?.as_bytes())?;

    let checkpoint = output.final_model.serialize();
    write(&dir.join(CHECKPOINT_FILE), &checkpoint)?;

    let mut lines = String::new();
    for r in &output.records {
        let line = MetricsLine {
            round: r.round,
            client: r.client.clone(),
            num_samples: r.num_samples,
            train_loss: r.train_loss,
            steps: r.steps,
            eval_loss: r.evaluation.as_ref().map(|e| e.loss),
            eval_samples: r.evaluation.as_ref().map(|e| e.samples),
            metrics: r.evaluation.as_ref().and_then(|e| e.report.clone()),
        };
        lines.push_str(&serde_json::to_string(&line)?);
        lines.push('\n');
    }
    write(&dir.join(METRICS_FILE), lines.as_bytes())?;
    write(&dir.join(LEDGER_FILE), output.ledger.to_csv().as_bytes())?;

    let summary = ExperimentSummary {
        name: cfg.name.clone(),
        workflow: cfg.workflow.kind,
        algorithm: cfg.workflow.aggregator.algorithm,
        num_rounds: cfg.workflow.num_rounds,
        clients: cfg.client_ids()?,
        seed: cfg.seed,
        epoch_budget: cfg.epoch_budget()?,
        centralized_epochs: cfg.centralized_epochs,
        budget_warning: cfg.budget_warning()?,
        checkpoint_sha256: hex(&Sha256::digest(&checkpoint)),
        overall: output.overall.clone(),
        aggregators: output.aggregators.clone(),
        orders: output.orders.clone(),
        ledger: output.ledger.summary(),
    };
    write(&dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    info!(dir = %dir.display(), "artifacts written");
    Ok(summary)
}

impl ExperimentOutcome {
    /// In-process run followed by [`write_artifacts`] into `cfg.output_dir`.
    pub fn execute(cfg: &ExperimentConfig) -> Result<Self> {
        let output = run_in_process(cfg)?;
        let summary = write_artifacts(cfg, &output, &cfg.output_dir)?;
        Ok(Self { output, summary })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::tests::small_config;
    use crate::experiment::PartitionConfig;

    #[test]
    fn client_data_is_deterministic_and_split() {
        let cfg = small_config();
        let a = client_data(&cfg).unwrap();
        let b = client_data(&cfg).unwrap();
        assert_eq!(a.len(), 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.train, y.train);
            assert_eq!(x.test, y.test);
            assert_eq!(x.train.len() + x.test.len(), 6);
            assert_eq!(x.train.len(), 5);
        }
    }

    #[test]
    fn partitioned_clients_cover_the_pool() {
        let mut cfg = small_config();
        cfg.data.partition = Some(PartitionConfig { clients: 3, alpha: Some(1.0) });
        let data = client_data(&cfg).unwrap();
        let ids: Vec<&str> = data.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, ["client-1", "client-2", "client-3"]);
        assert_eq!(data.iter().map(|c| c.train.len() + c.test.len()).sum::<usize>(), 12);
    }

    #[test]
    fn artifacts_are_written_and_reproducible() {
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();
        let out1 = run_in_process(&cfg).unwrap();
        let s1 = write_artifacts(&cfg, &out1, &dir.path().join("a")).unwrap();
        let out2 = run_in_process(&cfg).unwrap();
        let s2 = write_artifacts(&cfg, &out2, &dir.path().join("b")).unwrap();
        assert_eq!(s1.checkpoint_sha256, s2.checkpoint_sha256);
        for f in [CHECKPOINT_FILE, METRICS_FILE] {
            assert_eq!(
                fs::read(dir.path().join("a").join(f)).unwrap(),
                fs::read(dir.path().join("b").join(f)).unwrap()
            );
        }
        let log = fs::read_to_string(dir.path().join("a").join(METRICS_FILE)).unwrap();
        let rounds: std::collections::BTreeSet<u32> =
            log.lines().filter_map(|l| serde_json::from_str::<MetricsLine>(l).unwrap().round).collect();
        assert_eq!(rounds.len(), cfg.workflow.num_rounds as usize);
        assert!(dir.path().join("a").join(LEDGER_FILE).exists());
        let snapshot =
            ExperimentConfig::from_json(&fs::read_to_string(dir.path().join("a").join(CONFIG_FILE)).unwrap());
        assert_eq!(snapshot.unwrap(), cfg);
    }
}
