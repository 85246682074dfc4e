//! Experiment configuration, run orchestration with on-disk artifacts, and
//! repeated benchmark matrices.

mod bench;
mod run;

pub use bench::{run_bench, BaseConfig, BenchCell, BenchMatrix, BenchReport, CellStats, MeanStd, RepeatResult};
pub use run::{
    client_data, run_in_process, run_with_endpoint, serve_client, write_artifacts, ExperimentOutcome,
    ExperimentSummary, MetricsLine, CHECKPOINT_FILE, CONFIG_FILE, LEDGER_FILE, METRICS_FILE, SUMMARY_FILE,
};

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::accounting::{AccountingError, PowerModel};
use crate::data::{ClassManifest, DataError, GeneratorParams};
use crate::metrics::MetricsError;
use crate::models::{ModelError, ModelSpec};
use crate::params::ParamsError;
use crate::transport::{LinkModel, TransportError};
use crate::workflows::{budget_divergence, epoch_budget, WorkflowConfig, WorkflowError};

/// Relative FL/CL budget gap above which runs warn and benches refuse.
pub const BUDGET_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration at `{path}`: {message}")]
    ConfigInvalid { path: String, message: String },
    #[error("epoch budget mismatch: {0}")]
    BudgetMismatch(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Accounting(#[from] AccountingError),
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl ExperimentError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_owned(), source }
    }

    fn invalid(path: impl Into<String>, message: impl ToString) -> Self {
        Self::ConfigInvalid { path: path.into(), message: message.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    InProcess,
    MultiProcess,
}

/// A manifest given by path (relative to the config file) or inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ManifestSource {
    Path(PathBuf),
    Inline(ClassManifest),
}

/// Pools every manifest client and re-splits into equal shards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub clients: usize,
    /// Dirichlet concentration of the per-class shard preference; unset is uniform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: ManifestSource,
    #[serde(default = "default_generator")]
    pub generator: GeneratorParams,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionConfig>,
}

fn default_generator() -> GeneratorParams {
    GeneratorParams::square(16)
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_timeout() -> f64 {
    600.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Free-form remarks carried into the snapshot.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub seed: u64,
    pub workflow: WorkflowConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub power: PowerModel,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub link: LinkModel,
    #[serde(default = "default_timeout")]
    pub round_timeout_s: f64,
    #[serde(default = "default_true")]
    pub final_eval: bool,
    /// Epochs of the centralized reference; enables the budget parity check.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centralized_epochs: Option<f64>,
}

/// Parses JSON, reporting the dotted path of the first offending field.
pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { "<root>".to_owned() } else { path };
        ExperimentError::invalid(path, e.into_inner())
    })
}

pub(crate) fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        parse_json(text)
    }

    /// Reads, resolves relative manifest paths and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let cfg = Self::from_json(&read(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let cfg = cfg.resolve(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces a manifest path by the manifest itself, so the config alone
    /// reproduces the run.
    pub fn resolve(mut self, base: &Path) -> Result<Self> {
        if let ManifestSource::Path(p) = &self.data.manifest {
            let full = if p.is_absolute() { p.clone() } else { base.join(p) };
            let manifest = ClassManifest::load(&full)
                .map_err(|e| ExperimentError::invalid("data.manifest", format!("{}: {e}", full.display())))?;
            self.data.manifest = ManifestSource::Inline(manifest);
        }
        Ok(self)
    }

    /// The inline manifest; errors if [`Self::resolve`] was not applied.
    pub fn manifest(&self) -> Result<&ClassManifest> {
        match &self.data.manifest {
            ManifestSource::Inline(m) => Ok(m),
            ManifestSource::Path(p) => {
                Err(ExperimentError::invalid("data.manifest", format!("unresolved manifest path {}", p.display())))
            }
        }
    }

    /// Client ids in registration order.
    pub fn client_ids(&self) -> Result<Vec<String>> {
        Ok(match self.data.partition {
            Some(p) => (1..=p.clients).map(|i| format!("client-{i}")).collect(),
            None => self.manifest()?.clients.keys().cloned().collect(),
        })
    }

    pub fn round_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.round_timeout_s)
    }

    pub fn validate(&self) -> Result<()> {
        self.workflow.validate().map_err(|e| match e {
            WorkflowError::InvalidConfig { path, message } => ExperimentError::ConfigInvalid { path, message },
            other => other.into(),
        })?;
        self.model.validate().map_err(|e| ExperimentError::invalid("model", e))?;
        self.power.validate().map_err(|e| ExperimentError::invalid("power", e))?;
        if !(self.link.latency_s >= 0.0 && self.link.bandwidth_bytes_per_s > 0.0) {
            return Err(ExperimentError::invalid("link", "latency must be nonnegative and bandwidth positive"));
        }
        if !(self.round_timeout_s > 0.0 && self.round_timeout_s.is_finite()) {
            return Err(ExperimentError::invalid("round_timeout_s", "must be positive"));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(ExperimentError::invalid("data.train_fraction", "must lie in (0, 1)"));
        }
        let g = &self.data.generator;
        if g.height == 0 || g.width == 0 || g.max_blob == 0 || g.noise_std.is_nan() || g.noise_std < 0.0 {
            return Err(ExperimentError::invalid("data.generator", "sizes must be positive and noise nonnegative"));
        }
        if [g.height, g.width] != [self.model.input_shape[0], self.model.input_shape[1]] {
            return Err(ExperimentError::invalid(
                "model.input_shape",
                format!("model expects {:?} but images are {}x{}", self.model.input_shape, g.height, g.width),
            ));
        }
        if let Some(p) = self.data.partition {
            if p.clients == 0 {
                return Err(ExperimentError::invalid("data.partition.clients", "must be positive"));
            }
            if let Some(a) = p.alpha.filter(|a| !(*a > 0.0 && a.is_finite())) {
                return Err(ExperimentError::invalid("data.partition.alpha", format!("must be positive, got {a}")));
            }
        }
        if let Some(e) = self.centralized_epochs.filter(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(ExperimentError::invalid("centralized_epochs", format!("must be positive, got {e}")));
        }
        let manifest = self.manifest()?;
        manifest.validate().map_err(|e| ExperimentError::invalid("data.manifest", e))?;
        if manifest.classes.len() != self.model.num_classes {
            return Err(ExperimentError::invalid(
                "model.num_classes",
                format!("manifest lists {} classes, model predicts {}", manifest.classes.len(), self.model.num_classes),
            ));
        }
        if let Some(order) = &self.workflow.cyclic_order {
            crate::workflows::resolve_orders(Some(order), &self.client_ids()?, 1)
                .map_err(|e| ExperimentError::invalid("workflow.cyclic_order", e))?;
        }
        Ok(())
    }

    /// Equivalent centralized epochs of this federated schedule.
    pub fn epoch_budget(&self) -> Result<f64> {
        let clients = self.client_ids()?.len();
        Ok(epoch_budget(self.workflow.num_rounds, self.workflow.local.local_epochs, clients))
    }

    /// Warning text when the FL budget strays from the centralized one.
    pub fn budget_warning(&self) -> Result<Option<String>> {
        let Some(cl) = self.centralized_epochs else { return Ok(None) };
        let fl = self.epoch_budget()?;
        let gap = budget_divergence(fl, cl);
        Ok((gap > BUDGET_TOLERANCE).then(|| {
            format!(
                "federated budget {fl:.3} epochs differs from centralized {cl:.3} by {:.1}% (rounds {} x local epochs {} / clients)",
                gap * 100.0,
                self.workflow.num_rounds,
                self.workflow.local.local_epochs
            )
        }))
    }

    /// Loads and validates, logging a budget warning if needed.
    pub fn load_checked(path: &Path) -> Result<Self> {
        let cfg = Self::load(path)?;
        if let Some(w) = cfg.budget_warning()? {
            warn!("{w}");
        }
        Ok(cfg)
    }
}
