//! Orchestration of federated rounds: Scatter & Gather, cyclic weight
//! transfer relayed by the server (CWT) or passed peer to peer (DCWT), and
//! Swarm, where a rotating client aggregates.
//!
//! A coordinator drives every workflow through control messages; clients run
//! a message-driven agent that does not know which workflow it is in.

mod agent;
mod coordinator;
mod local;
mod protocol;

pub use agent::{join, ClientAgent, ClientSession};
pub use coordinator::{Coordinator, CoordinatorOptions};
pub use local::{run_cyclic, run_in_process, run_scatter_gather, run_swarm, ClientData, InProcessRun, RunOptions};
pub use protocol::{ReportKind, RoundReport};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accounting::{AccountingError, RunLedger};
use crate::aggregate::{AggregateError, AggregatorConfig};
use crate::metrics::MetricReport;
use crate::models::{Evaluation, ModelError, TrainConfig};
use crate::params::{ParameterSet, ParamsError};
use crate::seed::{derive_seed, name_tag, rng};
use crate::transport::TransportError;

/// Node id of the coordinator in every workflow.
pub const COORDINATOR: &str = "server";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkflowError {
    #[error("client `{client}` timed out in round {round}")]
    ClientTimeout { client: String, round: u32 },
    #[error("coordinator went silent")]
    CoordinatorTimeout,
    #[error("cyclic order: {0}")]
    OrderResolution(String),
    #[error("aggregating client `{client}` failed in round {round} after re-election")]
    AggregatorClientFailure { client: String, round: u32 },
    #[error("client `{client}` failed: {reason}")]
    ClientFailed { client: String, reason: String },
    #[error("run aborted by `{by}`: {reason}")]
    Aborted { by: String, reason: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("aggregation failed in round {round}: {source}")]
    Aggregation { round: u32, source: AggregateError },
    #[error("invalid workflow configuration at `{path}`: {message}")]
    InvalidConfig { path: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Accounting(#[from] AccountingError),
}

pub type Result<T> = std::result::Result<T, WorkflowError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WorkflowKind {
    #[serde(rename = "SG")]
    ScatterGather,
    #[serde(rename = "CWT")]
    Cyclic,
    #[serde(rename = "DCWT")]
    DecentralizedCyclic,
    Swarm,
}

impl WorkflowKind {
    pub fn name(self) -> &'static str {
        match self {
            WorkflowKind::ScatterGather => "S&G",
            WorkflowKind::Cyclic => "CWT",
            WorkflowKind::DecentralizedCyclic => "DCWT",
            WorkflowKind::Swarm => "Swarm",
        }
    }

    pub fn is_cyclic(self) -> bool {
        matches!(self, WorkflowKind::Cyclic | WorkflowKind::DecentralizedCyclic)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CyclicOrder {
    Fixed(Vec<String>),
    RandomPerRound(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowConfig {
    pub kind: WorkflowKind,
    pub num_rounds: u32,
    /// Cyclic workflows only; unset means registration order every round.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cyclic_order: Option<CyclicOrder>,
    pub aggregator: AggregatorConfig,
    pub local: TrainConfig,
}

impl WorkflowConfig {
    pub fn new(kind: WorkflowKind, num_rounds: u32, aggregator: AggregatorConfig, local: TrainConfig) -> Self {
        Self { kind, num_rounds, cyclic_order: None, aggregator, local }
    }

    /// Field-level checks; errors carry a dotted path below `workflow`.
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: String| {
            Err(WorkflowError::InvalidConfig { path: format!("workflow.{path}"), message })
        };
        if self.num_rounds == 0 {
            return bad("num_rounds", "must be positive".into());
        }
        if let Err((field, message)) = self.aggregator.validate() {
            return bad(&format!("aggregator.{field}"), message);
        }
        if let Err(e) = self.local.validate() {
            return bad("local", e.to_string());
        }
        if self.local.prox_mu != 0.0 {
            return bad("local.prox_mu", "set the proximal coefficient under workflow.aggregator.prox_mu".into());
        }
        Ok(())
    }
}

/// Equivalent centralized epochs of a federated schedule.
pub fn epoch_budget(num_rounds: u32, local_epochs: u32, num_clients: usize) -> f64 {
    num_rounds as f64 * local_epochs as f64 / num_clients as f64
}

/// Relative gap between a federated and a centralized epoch budget.
pub fn budget_divergence(fl_budget: f64, cl_epochs: f64) -> f64 {
    (fl_budget - cl_epochs).abs() / cl_epochs
}

/// Per-round visiting orders for the cyclic workflows.
pub fn resolve_orders(order: Option<&CyclicOrder>, clients: &[String], num_rounds: u32) -> Result<Vec<Vec<String>>> {
    match order {
        None => Ok(vec![clients.to_vec(); num_rounds as usize]),
        Some(CyclicOrder::Fixed(list)) => {
            let mut sorted_list = list.clone();
            sorted_list.sort();
            let mut sorted_clients = clients.to_vec();
            sorted_clients.sort();
            if let Some(unknown) = list.iter().find(|c| !clients.contains(c)) {
                return Err(WorkflowError::OrderResolution(format!("unknown client `{unknown}`")));
            }
            if sorted_list != sorted_clients {
                return Err(WorkflowError::OrderResolution("fixed order must list every client exactly once".into()));
            }
            Ok(vec![list.clone(); num_rounds as usize])
        }
        Some(CyclicOrder::RandomPerRound(seed)) => Ok((0..num_rounds)
            .map(|t| {
                let mut o = clients.to_vec();
                o.shuffle(&mut rng(derive_seed(*seed, &[t as u64])));
                o
            })
            .collect()),
    }
}

/// Swarm aggregator for `round`: rotation over the registration order.
pub fn elect(clients: &[String], round: u32) -> &str {
    &clients[round as usize % clients.len()]
}

/// Default per-client seed derived from the run's master seed.
pub fn client_seed(master: u64, client: &str) -> u64 {
    derive_seed(master, &[name_tag(client)])
}

/// Seed of a client's local training in one round.
pub fn round_seed(client_seed: u64, round: u32) -> u64 {
    derive_seed(client_seed, &[round as u64])
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// `None` for the final evaluation of the returned model.
    pub round: Option<u32>,
    pub client: String,
    pub num_samples: u64,
    pub train_loss: f64,
    pub steps: u64,
    pub evaluation: Option<Evaluation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub final_model: ParameterSet,
    pub ledger: RunLedger,
    pub records: Vec<RoundRecord>,
    /// Test-set-size weighted report of the final model across clients.
    pub overall: Option<MetricReport>,
    pub orders: Vec<Vec<String>>,
    pub aggregators: Vec<String>,
}
