use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use tracing::{debug, warn};

use super::protocol::{
    decode_result, decode_variates, encode_report, encode_result, encode_state, encode_variates, is_state,
    is_variate_pair, AfterAggregate, Delivery, Mailbox, Register, ReportKind, RoundReport, Source, TakeError, Task,
    VariateSource, COMPLETE, REPORT_HEADER,
};
use super::{round_seed, Result, WorkflowConfig, WorkflowError};
use crate::aggregate::{Aggregator, Algorithm};
use crate::models::{train_local, ClientUpdate, Evaluation, LocalContext, Model, TrainConfig, VariateInputs};
use crate::params::ParameterSet;
use crate::transport::{frame_len, Endpoint, Envelope, MsgType};

/// A registered client: its mailbox and what the coordinator sent at setup.
pub struct ClientSession<'a> {
    mb: Mailbox<'a>,
    coordinator: String,
    /// Configuration snapshot shipped by the coordinator, if any.
    pub config: Option<serde_json::Value>,
    /// Every registered client in registration order.
    pub peers: Vec<String>,
}

/// Registers with the coordinator and waits for the setup message.
pub fn join<'a>(
    ep: &'a dyn Endpoint,
    coordinator: &str,
    coordinator_addr: Option<&str>,
    timeout: Duration,
) -> Result<ClientSession<'a>> {
    if let Some(addr) = coordinator_addr {
        ep.add_peer_addr(coordinator, addr)?;
    }
    let mut mb = Mailbox::new(ep);
    let reg = Register { addr: ep.advertised_addr() };
    mb.send(Envelope::new(
        MsgType::Register,
        ep.id(),
        coordinator,
        0,
        serde_json::to_vec(&reg).expect("registration serializes"),
    ))?;
    let env = mb
        .take(Instant::now() + timeout, |e| e.msg_type == MsgType::TaskAssign && e.sender == coordinator)
        .map_err(|e| match e {
            TakeError::Timeout => WorkflowError::CoordinatorTimeout,
            TakeError::Aborted { by, reason } => WorkflowError::Aborted { by, reason },
            TakeError::Transport(t) => t.into(),
        })?;
    let Task::Setup { peers, config } = Task::decode(&env.payload)? else {
        return Err(WorkflowError::Protocol("expected setup after registration".into()));
    };
    for (id, addr) in &peers {
        if let Some(addr) = addr.as_deref().filter(|_| id != ep.id()) {
            ep.add_peer_addr(id, addr)?;
        }
    }
    Ok(ClientSession { mb, coordinator: coordinator.to_owned(), config, peers: peers.into_keys().collect() })
}

/// Message-driven client: trains, relays, aggregates and evaluates as told.
pub struct ClientAgent<'m, M: Model> {
    pub id: String,
    pub model: &'m M,
    pub train: &'m [M::Sample],
    pub test: &'m [M::Sample],
    /// Base of this client's per-round training seeds.
    pub seed: u64,
    /// Seed used when told to initialize the model itself.
    pub model_seed: u64,
    pub cfg: WorkflowConfig,
    /// Longest wait for the coordinator's next instruction.
    pub idle_timeout: Duration,
    /// Failure injection: ignore the aggregation task of this round.
    pub skip_aggregation_round: Option<u32>,
}

struct AgentState {
    globals: BTreeMap<u32, ParameterSet>,
    result: Option<(u32, Vec<u8>)>,
    aggregator: Option<Aggregator>,
    sent_bytes: u64,
    sent_msgs: u64,
    sent_comm: f64,
}

#[derive(Default)]
struct Timing {
    train_s: f64,
    eval_s: f64,
    aggregate_s: f64,
}

impl<'m, M: Model> ClientAgent<'m, M> {
    /// Serves tasks until the coordinator ends the run.
    pub fn serve(&self, mut session: ClientSession<'_>) -> Result<()> {
        let mut state = AgentState {
            globals: BTreeMap::new(),
            result: None,
            aggregator: None,
            sent_bytes: 0,
            sent_msgs: 0,
            sent_comm: 0.0,
        };
        let coordinator = session.coordinator.clone();
        loop {
            let deadline = Instant::now() + self.idle_timeout;
            let env = match session.mb.take(deadline, |e| e.msg_type == MsgType::TaskAssign && e.sender == coordinator)
            {
                Ok(env) => env,
                Err(TakeError::Aborted { reason, .. }) if reason == COMPLETE => return Ok(()),
                Err(TakeError::Aborted { by, reason }) => return Err(WorkflowError::Aborted { by, reason }),
                Err(TakeError::Timeout) => return Err(WorkflowError::CoordinatorTimeout),
                Err(TakeError::Transport(e)) => return Err(e.into()),
            };
            session.mb.purge_before(env.round);
            let outcome =
                Task::decode(&env.payload).and_then(|task| self.handle(&mut session, &mut state, env.round, task));
            if let Err(e) = outcome {
                if !matches!(e, WorkflowError::Aborted { .. }) {
                    warn!(client = %self.id, error = %e, "task failed, notifying coordinator");
                    let _ = session.mb.send(Envelope::new(
                        MsgType::Abort,
                        &self.id,
                        &coordinator,
                        env.round,
                        e.to_string().into_bytes(),
                    ));
                }
                return Err(e);
            }
        }
    }

    fn wait(&self, session: &mut ClientSession<'_>, pred: impl FnMut(&Envelope) -> bool) -> Result<Envelope> {
        session.mb.take(Instant::now() + self.idle_timeout, pred).map_err(|e| match e {
            TakeError::Timeout => WorkflowError::Protocol(format!("{} waited too long for a peer message", self.id)),
            TakeError::Aborted { by, reason } => WorkflowError::Aborted { by, reason },
            TakeError::Transport(t) => t.into(),
        })
    }

    fn send(
        &self,
        session: &mut ClientSession<'_>,
        msg_type: MsgType,
        to: &str,
        round: u32,
        payload: Vec<u8>,
    ) -> Result<()> {
        session.mb.send(Envelope::new(msg_type, &self.id, to, round, payload))?;
        Ok(())
    }

    fn train_config(&self, round: u32) -> TrainConfig {
        TrainConfig {
            seed: round_seed(self.seed, round),
            prox_mu: self.cfg.aggregator.client_prox_mu(),
            ..self.cfg.local.clone()
        }
    }

    fn handle(&self, session: &mut ClientSession<'_>, state: &mut AgentState, round: u32, task: Task) -> Result<()> {
        debug!(client = %self.id, round, ?task, "task");
        match task {
            Task::Setup { .. } => Err(WorkflowError::Protocol("repeated setup".into())),
            Task::Train { source, variates, deliver } => self.train(session, state, round, source, variates, deliver),
            Task::Aggregate { participants, state_from, then } => {
                if self.skip_aggregation_round == Some(round) {
                    warn!(client = %self.id, round, "skipping aggregation (failure injection)");
                    return Ok(());
                }
                self.aggregate(session, state, round, &participants, state_from, then)
            }
            Task::HandState { to } => {
                let agg = state
                    .aggregator
                    .as_ref()
                    .ok_or_else(|| WorkflowError::Protocol(format!("{} holds no aggregator state", self.id)))?;
                self.send(session, MsgType::VariatePayload, &to, round, encode_state(&agg.export_state()))
            }
            Task::Resend { to } => match &state.result {
                Some((r, payload)) if *r == round => {
                    let payload = payload.clone();
                    self.send(session, MsgType::ResultSubmit, &to, round, payload)
                }
                _ => Err(WorkflowError::Protocol(format!("{} has no result for round {round}", self.id))),
            },
            Task::Evaluate { source } => {
                let env = self
                    .wait(session, |e| e.msg_type == MsgType::ModelPayload && e.sender == source && e.round == round)?;
                let model = ParameterSet::deserialize(&env.payload)?;
                let start = Instant::now();
                let evaluation = self.model.evaluate(&model, self.test, &self.cfg.local)?;
                let timing = Timing { eval_s: start.elapsed().as_secs_f64(), ..Timing::default() };
                self.report(session, state, ReportKind::Evaluate, round, timing, None, Some(evaluation))
            }
        }
    }

    fn train(
        &self,
        session: &mut ClientSession<'_>,
        state: &mut AgentState,
        round: u32,
        source: Source,
        variates: VariateSource,
        deliver: Delivery,
    ) -> Result<()> {
        let start_model = match source {
            Source::Init => self.model.init_params(self.model_seed),
            Source::Peer(p) => {
                let env =
                    self.wait(session, |e| e.msg_type == MsgType::ModelPayload && e.sender == p && e.round == round)?;
                ParameterSet::deserialize(&env.payload)?
            }
        };
        let variates = match variates {
            VariateSource::None => None,
            VariateSource::Zero => {
                let zero = start_model.trainable().zeros_like();
                Some((zero.clone(), zero))
            }
            VariateSource::Peer(p) => {
                let env = self.wait(session, |e| is_variate_pair(e) && e.sender == p && e.round == round)?;
                Some(decode_variates(&env.payload)?)
            }
        };
        state.globals.retain(|&r, _| r + 1 >= round);
        state.globals.insert(round, start_model.clone());

        let cfg = self.train_config(round);
        let ctx = LocalContext {
            client: &self.id,
            round,
            global_ref: Some(&start_model),
            variates: variates.as_ref().map(|(c, ci)| VariateInputs { client: ci, global: c }),
        };
        let started = Instant::now();
        let update = train_local(self.model, &start_model, self.train, &cfg, ctx)?;
        let train_s = started.elapsed().as_secs_f64();

        match deliver {
            Delivery::Result { to } => {
                let payload = encode_result(&update);
                state.result = Some((round, payload.clone()));
                self.send(session, MsgType::ResultSubmit, &to, round, payload)?;
            }
            Delivery::Relay { to, round: next } => {
                self.send(session, MsgType::ModelPayload, &to, next, update.weights.serialize())?;
            }
        }

        let started = Instant::now();
        let evaluation = self.model.evaluate(&update.weights, self.test, &cfg)?;
        let timing = Timing { train_s, eval_s: started.elapsed().as_secs_f64(), aggregate_s: 0.0 };
        self.report(session, state, ReportKind::Train, round, timing, Some(&update), Some(evaluation))
    }

    fn aggregate(
        &self,
        session: &mut ClientSession<'_>,
        state: &mut AgentState,
        round: u32,
        participants: &[String],
        state_from: Option<String>,
        then: AfterAggregate,
    ) -> Result<()> {
        let global = state
            .globals
            .get(&round)
            .cloned()
            .ok_or_else(|| WorkflowError::Protocol(format!("{} has no global model for round {round}", self.id)))?;
        let agg_err = |source| WorkflowError::Aggregation { round, source };
        let mut agg = match (state_from, state.aggregator.take()) {
            (Some(p), _) => {
                let env = self.wait(session, |e| is_state(e) && e.sender == p && e.round == round)?;
                let mut agg = Aggregator::new(self.cfg.aggregator.clone(), &global, participants).map_err(agg_err)?;
                agg.import_state(&env.payload[1..]).map_err(agg_err)?;
                agg
            }
            (None, Some(agg)) => agg,
            (None, None) => Aggregator::new(self.cfg.aggregator.clone(), &global, participants).map_err(agg_err)?,
        };
        let mut updates = Vec::with_capacity(participants.len());
        for p in participants {
            let env =
                self.wait(session, |e| e.msg_type == MsgType::ResultSubmit && e.sender == *p && e.round == round)?;
            updates.push(decode_result(&env)?);
        }
        let started = Instant::now();
        let next = agg.aggregate(&global, &updates).map_err(agg_err)?;
        let aggregate_s = started.elapsed().as_secs_f64();

        match then {
            AfterAggregate::Broadcast => {
                let payload = next.serialize();
                for p in participants {
                    self.send(session, MsgType::ModelPayload, p, round + 1, payload.clone())?;
                    if self.cfg.aggregator.algorithm == Algorithm::Scaffold {
                        let v = agg.variates().expect("Scaffold keeps variates");
                        let ci = v.client(p).expect("participant has a variate");
                        self.send(session, MsgType::VariatePayload, p, round + 1, encode_variates(v.global(), ci))?;
                    }
                }
            }
            AfterAggregate::Final { to } => {
                self.send(session, MsgType::ModelPayload, &to, round, next.serialize())?;
            }
        }
        state.aggregator = Some(agg);
        let timing = Timing { aggregate_s, ..Timing::default() };
        self.report(session, state, ReportKind::Aggregate, round, timing, None, None)
    }

    #[allow(clippy::too_many_arguments)]
    fn report(
        &self,
        session: &mut ClientSession<'_>,
        state: &mut AgentState,
        kind: ReportKind,
        round: u32,
        timing: Timing,
        update: Option<&ClientUpdate>,
        evaluation: Option<Evaluation>,
    ) -> Result<()> {
        let ep = session.mb.endpoint();
        let stats = ep.stats();
        let sent = stats.bytes_from(&self.id);
        let msgs: u64 = stats.links.iter().filter(|((s, _), _)| *s == self.id).map(|(_, l)| l.messages).sum();
        let comm = ep.modeled_send_time();
        let mut report = RoundReport {
            kind,
            client: self.id.clone(),
            round,
            bytes_out: 0,
            msgs_out: msgs - state.sent_msgs + 1,
            comm_s: comm - state.sent_comm,
            train_s: timing.train_s,
            eval_s: timing.eval_s,
            aggregate_s: timing.aggregate_s,
            num_samples: update.map_or(self.train.len() as u64, |u| u.num_samples),
            train_loss: update.map_or(0.0, |u| u.train_loss),
            steps: update.map_or(0, |u| u.steps),
            evaluation,
        };
        let own = frame_len(&self.id, &session.coordinator, encode_report(&report).len()) as u64;
        report.bytes_out = sent - state.sent_bytes + own;
        let payload = encode_report(&report);
        debug_assert!(payload.len() >= REPORT_HEADER);
        let coordinator = session.coordinator.clone();
        self.send(session, MsgType::RoundBarrier, &coordinator, round, payload)?;
        state.sent_bytes = sent + own;
        state.sent_msgs = msgs + 1;
        state.sent_comm = comm;
        Ok(())
    }
}
