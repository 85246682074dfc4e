use std::time::Duration;

use tracing::warn;

use super::{
    join, ClientAgent, Coordinator, CoordinatorOptions, Result, RunOutput, WorkflowConfig, WorkflowError, WorkflowKind,
    COORDINATOR,
};
use crate::accounting::PowerModel;
use crate::models::Model;
use crate::transport::{ChannelStats, InProcessBus, LinkModel, TraceRecord};

/// One client's identity and data.
#[derive(Debug, Clone)]
pub struct ClientData<S> {
    pub id: String,
    pub seed: u64,
    pub train: Vec<S>,
    pub test: Vec<S>,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub link: LinkModel,
    pub round_timeout: Duration,
    pub final_eval: bool,
    pub power: PowerModel,
    pub model_seed: u64,
    /// Failure injection: this client ignores its aggregation task in this round.
    pub fail_aggregation: Option<(String, u32)>,
    pub trace: bool,
    pub setup_config: Option<serde_json::Value>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            link: LinkModel::default(),
            round_timeout: Duration::from_secs(600),
            final_eval: true,
            power: PowerModel::default(),
            model_seed: 0,
            fail_aggregation: None,
            trace: false,
            setup_config: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InProcessRun {
    pub output: RunOutput,
    pub trace: Vec<TraceRecord>,
    pub stats: ChannelStats,
}

/// Runs a workflow with every node on its own thread over an in-process bus.
pub fn run_in_process<M: Model>(
    cfg: &WorkflowConfig,
    model: &M,
    clients: &[ClientData<M::Sample>],
    opts: &RunOptions,
) -> Result<InProcessRun> {
    cfg.validate()?;
    let mut bus = InProcessBus::new(opts.link);
    if opts.trace {
        bus = bus.with_trace();
    }
    let server_ep = bus.endpoint(COORDINATOR);
    let client_eps: Vec<_> = clients.iter().map(|c| bus.endpoint(&c.id)).collect();
    let ids: Vec<String> = clients.iter().map(|c| c.id.clone()).collect();
    let idle_timeout = opts.round_timeout * 3;

    let (coordinator_result, client_results) = std::thread::scope(|scope| {
        let handles: Vec<_> = clients
            .iter()
            .zip(&client_eps)
            .map(|(c, ep)| {
                let agent = ClientAgent {
                    id: c.id.clone(),
                    model,
                    train: &c.train,
                    test: &c.test,
                    seed: c.seed,
                    model_seed: opts.model_seed,
                    cfg: cfg.clone(),
                    idle_timeout,
                    skip_aggregation_round: opts
                        .fail_aggregation
                        .as_ref()
                        .filter(|(id, _)| *id == c.id)
                        .map(|(_, r)| *r),
                };
                scope.spawn(move || {
                    let session = join(ep, COORDINATOR, None, idle_timeout)?;
                    agent.serve(session)
                })
            })
            .collect();

        let coordinator_opts = CoordinatorOptions {
            round_timeout: opts.round_timeout,
            final_eval: opts.final_eval,
            power: opts.power.clone(),
            setup_config: opts.setup_config.clone(),
        };
        let init = model.init_params(opts.model_seed);
        let result = Coordinator::new(&server_ep, cfg.clone(), ids.clone(), init, coordinator_opts).run();
        let client_results: Vec<Result<()>> = handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(WorkflowError::Protocol("client thread panicked".into()))))
            .collect();
        (result, client_results)
    });

    let output = coordinator_result?;
    for (id, r) in ids.iter().zip(client_results) {
        if let Err(e) = r {
            warn!(client = %id, error = %e, "client ended with an error");
        }
    }
    Ok(InProcessRun { output, trace: bus.trace(), stats: bus.stats() })
}

fn with_kind(cfg: &WorkflowConfig, kind: WorkflowKind) -> WorkflowConfig {
    WorkflowConfig { kind, ..cfg.clone() }
}

pub fn run_scatter_gather<M: Model>(
    cfg: &WorkflowConfig,
    model: &M,
    clients: &[ClientData<M::Sample>],
    opts: &RunOptions,
) -> Result<InProcessRun> {
    run_in_process(&with_kind(cfg, WorkflowKind::ScatterGather), model, clients, opts)
}

/// Cyclic weight transfer; `server_relayed` routes every hop through the coordinator.
pub fn run_cyclic<M: Model>(
    cfg: &WorkflowConfig,
    model: &M,
    clients: &[ClientData<M::Sample>],
    opts: &RunOptions,
    server_relayed: bool,
) -> Result<InProcessRun> {
    let kind = if server_relayed { WorkflowKind::Cyclic } else { WorkflowKind::DecentralizedCyclic };
    run_in_process(&with_kind(cfg, kind), model, clients, opts)
}

pub fn run_swarm<M: Model>(
    cfg: &WorkflowConfig,
    model: &M,
    clients: &[ClientData<M::Sample>],
    opts: &RunOptions,
) -> Result<InProcessRun> {
    run_in_process(&with_kind(cfg, WorkflowKind::Swarm), model, clients, opts)
}
