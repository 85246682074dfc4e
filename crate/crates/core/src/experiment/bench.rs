use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use super::{
    client_data, parse_json, read, ExperimentConfig, ExperimentError, PartitionConfig, Result, BUDGET_TOLERANCE,
};
use crate::accounting::{compare_totals, Comparison, Phase, RunLedger, Totals};
use crate::aggregate::{Algorithm, BufferPolicy};
use crate::metrics::MetricReport;
use crate::models::{train_local, LocalContext, Model, Normalization, SegNet};
use crate::seed::derive_seed;
use crate::workflows::{
    self, budget_divergence, client_seed, epoch_budget, round_seed, CyclicOrder, RunOptions, WorkflowKind,
};

/// The base experiment, given by path (relative to the matrix file) or inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BaseConfig {
    Path(PathBuf),
    Inline(Box<ExperimentConfig>),
}

/// Overrides applied to the base experiment for one column of the report.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchCell {
    pub name: String,
    /// Train once on the pooled data of all clients, with no workflow.
    #[serde(default)]
    pub centralized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<WorkflowKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<Algorithm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cyclic_order: Option<CyclicOrder>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_rounds: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_epochs: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prox_mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_momentum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buffer_policy: Option<BufferPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchMatrix {
    pub base: BaseConfig,
    pub cells: Vec<BenchCell>,
    pub repeats: u32,
    /// Cell the accounting comparison is taken against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    /// Run even when a cell's epoch budget strays from the centralized one.
    #[serde(default)]
    pub force: bool,
}

impl BenchMatrix {
    pub fn from_json(text: &str) -> Result<Self> {
        parse_json(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut m = Self::from_json(&read(path)?)?;
        let base_dir = path.parent().unwrap_or(Path::new("."));
        if let BaseConfig::Path(p) = &m.base {
            let full = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
            m.base = BaseConfig::Inline(Box::new(ExperimentConfig::load(&full)?));
        }
        Ok(m)
    }

    pub fn base(&self) -> Result<&ExperimentConfig> {
        match &self.base {
            BaseConfig::Inline(c) => Ok(c),
            BaseConfig::Path(p) => Err(ExperimentError::invalid("base", format!("unresolved path {}", p.display()))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(ExperimentError::invalid("cells", "at least one cell is required"));
        }
        if self.repeats == 0 {
            return Err(ExperimentError::invalid("repeats", "must be positive"));
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, c) in self.cells.iter().enumerate() {
            if !names.insert(&c.name) {
                return Err(ExperimentError::invalid(
                    format!("cells[{i}].name"),
                    format!("duplicate cell `{}`", c.name),
                ));
            }
        }
        if let Some(b) = self.baseline.as_ref().filter(|b| !names.contains(b)) {
            return Err(ExperimentError::invalid("baseline", format!("no cell named `{b}`")));
        }
        let base = self.base()?;
        for (i, c) in self.cells.iter().enumerate() {
            let cfg = self.cell_config(base, c, i, 0);
            cfg.validate().map_err(|e| match e {
                ExperimentError::ConfigInvalid { path, message } => {
                    ExperimentError::ConfigInvalid { path: format!("cells[{i}]: {path}"), message }
                }
                other => other,
            })?;
            if c.centralized && cfg.centralized_epochs.is_none() && c.local_epochs.is_none() {
                return Err(ExperimentError::invalid(
                    format!("cells[{i}].local_epochs"),
                    "a centralized cell needs local_epochs or base centralized_epochs",
                ));
            }
        }
        Ok(())
    }

    /// Experiment of one cell repeat; its seed is derived from the base seed,
    /// the cell index and the repeat index.
    pub fn cell_config(
        &self,
        base: &ExperimentConfig,
        cell: &BenchCell,
        index: usize,
        repeat: u32,
    ) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.name = Some(cell.name.clone());
        cfg.seed = derive_seed(base.seed, &[index as u64, repeat as u64]);
        let w = &mut cfg.workflow;
        if let Some(k) = cell.kind {
            w.kind = k;
        }
        if let Some(a) = cell.algorithm {
            w.aggregator.algorithm = a;
        }
        if cell.cyclic_order.is_some() {
            w.cyclic_order = cell.cyclic_order.clone();
        }
        if let Some(r) = cell.num_rounds {
            w.num_rounds = r;
        }
        if let Some(e) = cell.local_epochs {
            w.local.local_epochs = e;
        }
        if let Some(mu) = cell.prox_mu {
            w.aggregator.prox_mu = mu;
        }
        if let Some(lr) = cell.server_lr {
            w.aggregator.server_lr = lr;
        }
        if let Some(m) = cell.server_momentum {
            w.aggregator.server_momentum = m;
        }
        if cell.buffer_policy.is_some() {
            w.aggregator.buffer_policy = cell.buffer_policy;
        }
        if let Some(n) = cell.normalization {
            cfg.model.normalization = n;
        }
        if cell.partition.is_some() {
            cfg.data.partition = cell.partition;
        }
        cfg
    }

    /// Cells whose federated budget strays from the centralized reference.
    pub fn budget_warnings(&self) -> Result<Vec<String>> {
        let base = self.base()?;
        let Some(cl) = base.centralized_epochs else { return Ok(Vec::new()) };
        let mut out = Vec::new();
        for (i, c) in self.cells.iter().enumerate().filter(|(_, c)| !c.centralized) {
            let cfg = self.cell_config(base, c, i, 0);
            let w = &cfg.workflow;
            let fl = epoch_budget(w.num_rounds, w.local.local_epochs, cfg.client_ids()?.len());
            let gap = budget_divergence(fl, cl);
            if gap > BUDGET_TOLERANCE {
                out.push(format!(
                    "cell `{}`: federated budget {fl:.3} vs centralized {cl:.3} ({:.1}% apart)",
                    c.name,
                    gap * 100.0
                ));
            }
        }
        Ok(out)
    }
}

/// Mean and sample standard deviation; `std` is absent for a single value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: Option<f64>,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std =
            (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Some(Self { mean, std })
    }

    fn show(m: Option<Self>, scale: f64, digits: usize) -> String {
        match m {
            None => "-".into(),
            Some(MeanStd { mean, std: None }) => format!("{:.*}", digits, mean * scale),
            Some(MeanStd { mean, std: Some(s) }) => format!("{:.*} ± {:.*}", digits, mean * scale, digits, s * scale),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub seed: u64,
    pub overall: Option<MetricReport>,
    pub totals: Totals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub name: String,
    pub repeats: Vec<RepeatResult>,
    pub failures: Vec<String>,
    pub macc: Option<MeanStd>,
    pub mwp: Option<MeanStd>,
    pub mwf1: Option<MeanStd>,
    pub mwiou: Option<MeanStd>,
    pub runtime_s: Option<MeanStd>,
    pub energy_j: Option<MeanStd>,
    pub bytes: Option<MeanStd>,
    /// Mean totals against the baseline cell's mean totals.
    pub vs_baseline: Option<Comparison>,
}

impl CellStats {
    fn from_repeats(name: String, repeats: Vec<RepeatResult>, failures: Vec<String>) -> Self {
        let metric = |f: fn(&MetricReport) -> f64| {
            MeanStd::of(&repeats.iter().filter_map(|r| r.overall.as_ref().map(f)).collect::<Vec<_>>())
        };
        let total = |f: fn(&Totals) -> f64| MeanStd::of(&repeats.iter().map(|r| f(&r.totals)).collect::<Vec<_>>());
        Self {
            macc: metric(|m| m.macc),
            mwp: metric(|m| m.mwp),
            mwf1: metric(|m| m.mwf1),
            mwiou: metric(|m| m.mwiou),
            runtime_s: total(|t| t.runtime_s),
            energy_j: total(|t| t.energy_j),
            bytes: total(|t| t.bytes as f64),
            name,
            repeats,
            failures,
            vs_baseline: None,
        }
    }

    fn mean_totals(&self) -> Option<Totals> {
        Some(Totals {
            runtime_s: self.runtime_s?.mean,
            energy_j: self.energy_j?.mean,
            bytes: self.bytes?.mean.round() as u64,
        })
    }

    pub fn failed(&self) -> bool {
        !self.failures.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub repeats: u32,
    pub baseline: Option<String>,
    pub warnings: Vec<String>,
    pub cells: Vec<CellStats>,
}

impl BenchReport {
    pub fn any_failed(&self) -> bool {
        self.cells.iter().any(CellStats::failed)
    }

    /// Metric rows per cell with mean ± std over repeats, then the accounting comparison.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<18} {:>17} {:>17} {:>17} {:>17}", "cell", "mACC %", "mwP %", "mwF1 %", "mwIoU %");
        for c in &self.cells {
            if c.repeats.is_empty() {
                let _ = writeln!(out, "{:<18} FAILED: {}", c.name, c.failures.join("; "));
                continue;
            }
            let _ = writeln!(
                out,
                "{:<18} {:>17} {:>17} {:>17} {:>17}{}",
                c.name,
                MeanStd::show(c.macc, 100.0, 2),
                MeanStd::show(c.mwp, 100.0, 2),
                MeanStd::show(c.mwf1, 100.0, 2),
                MeanStd::show(c.mwiou, 100.0, 2),
                if c.failed() { format!("  ({} failed)", c.failures.len()) } else { String::new() }
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<18} {:>19} {:>19} {:>15} {:>10} {:>10} {:>10}",
            "cell (modeled)", "runtime s", "energy kJ", "bytes", "runtime", "energy", "bytes"
        );
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |p| format!("{p:+.1}%"));
        for c in self.cells.iter().filter(|c| !c.repeats.is_empty()) {
            let _ = writeln!(
                out,
                "{:<18} {:>19} {:>19} {:>15} {:>10} {:>10} {:>10}",
                c.name,
                MeanStd::show(c.runtime_s, 1.0, 3),
                MeanStd::show(c.energy_j, 1e-3, 4),
                MeanStd::show(c.bytes, 1.0, 0),
                pct(c.vs_baseline.map(|v| v.runtime_pct)),
                pct(c.vs_baseline.map(|v| v.energy_pct)),
                pct(c.vs_baseline.and_then(|v| v.bytes_pct)),
            );
        }
        if let Some(b) = &self.baseline {
            let _ = writeln!(out, "changes relative to `{b}`");
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

/// Pooled training of one model on every client's data; no traffic.
fn run_centralized(cfg: &ExperimentConfig, epochs: u32) -> Result<(Option<MetricReport>, Totals)> {
    let model = SegNet::new(cfg.model.clone())?;
    let clients = client_data(cfg)?;
    let train: Vec<_> = clients.iter().flat_map(|c| c.train.iter().cloned()).collect();
    let test: Vec<_> = clients.iter().flat_map(|c| c.test.iter().cloned()).collect();
    let local = crate::models::TrainConfig {
        local_epochs: epochs,
        seed: round_seed(client_seed(cfg.seed, "central"), 0),
        ..cfg.workflow.local.clone()
    };
    let started = Instant::now();
    let init = model.init_params(derive_seed(cfg.seed, &[crate::seed::name_tag("model")]));
    let t0 = Instant::now();
    let update = train_local(&model, &init, &train, &local, LocalContext::new("central", 0))?;
    let train_s = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let evaluation = model.evaluate(&update.weights, &test, &local)?;
    let eval_s = t1.elapsed().as_secs_f64();

    let mut ledger = RunLedger::new(cfg.power.clone());
    ledger.record_phase("central", Some(0), Phase::Train, train_s, 0)?;
    ledger.record_phase("central", None, Phase::Evaluate, eval_s, 0)?;
    ledger.wall_s = started.elapsed().as_secs_f64();
    Ok((evaluation.report, ledger.totals()))
}

fn run_cell(matrix: &BenchMatrix, base: &ExperimentConfig, cell: &BenchCell, index: usize) -> CellStats {
    let mut repeats = Vec::new();
    let mut failures = Vec::new();
    for r in 0..matrix.repeats {
        let cfg = matrix.cell_config(base, cell, index, r);
        info!(cell = %cell.name, repeat = r, seed = cfg.seed, "bench run");
        let result = if cell.centralized {
            let epochs = cell
                .local_epochs
                .or_else(|| cfg.centralized_epochs.map(|e| e.round() as u32))
                .unwrap_or(cfg.workflow.local.local_epochs);
            run_centralized(&cfg, epochs)
        } else {
            run_federated(&cfg)
        };
        match result {
            Ok((overall, totals)) => repeats.push(RepeatResult { seed: cfg.seed, overall, totals }),
            Err(e) => {
                warn!(cell = %cell.name, repeat = r, error = %e, "bench run failed");
                failures.push(format!("repeat {r}: {e}"));
            }
        }
    }
    CellStats::from_repeats(cell.name.clone(), repeats, failures)
}

fn run_federated(cfg: &ExperimentConfig) -> Result<(Option<MetricReport>, Totals)> {
    cfg.validate()?;
    let model = SegNet::new(cfg.model.clone())?;
    let clients = client_data(cfg)?;
    let opts = RunOptions {
        link: cfg.link,
        round_timeout: cfg.round_timeout(),
        final_eval: true,
        power: cfg.power.clone(),
        model_seed: derive_seed(cfg.seed, &[crate::seed::name_tag("model")]),
        ..RunOptions::default()
    };
    let out = workflows::run_in_process(&cfg.workflow, &model, &clients, &opts)?.output;
    Ok((out.overall, out.ledger.totals()))
}

/// Runs every cell `repeats` times in this process. Failed repeats are
/// reported in their cell; budget mismatches refuse the whole matrix unless forced.
pub fn run_bench(matrix: &BenchMatrix) -> Result<BenchReport> {
    matrix.validate()?;
    let warnings = matrix.budget_warnings()?;
    for w in &warnings {
        warn!("{w}");
    }
    if !warnings.is_empty() && !matrix.force {
        return Err(ExperimentError::BudgetMismatch(warnings.join("; ")));
    }
    let base = matrix.base()?;
    let mut cells: Vec<CellStats> =
        matrix.cells.iter().enumerate().map(|(i, c)| run_cell(matrix, base, c, i)).collect();
    if let Some(b) = &matrix.baseline {
        let base_totals = cells.iter().find(|c| &c.name == b).and_then(CellStats::mean_totals);
        if let Some(bt) = base_totals {
            for c in &mut cells {
                c.vs_baseline = c.mean_totals().and_then(|t| compare_totals(&bt, &t).ok());
            }
        }
    }
    Ok(BenchReport { repeats: matrix.repeats, baseline: matrix.baseline.clone(), warnings, cells })
}
