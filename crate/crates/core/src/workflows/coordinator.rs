use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use tracing::{debug, info, warn};

use super::protocol::{
    decode_report, decode_result, encode_variates, report_kind, AfterAggregate, Delivery, Mailbox, Register,
    ReportKind, RoundReport, Source, TakeError, Task, VariateSource, COMPLETE,
};
use super::{elect, resolve_orders, Result, RoundRecord, RunOutput, WorkflowConfig, WorkflowError, WorkflowKind};
use crate::accounting::{Phase, PowerModel, RunLedger};
use crate::aggregate::{Aggregator, Algorithm};
use crate::metrics;
use crate::params::ParameterSet;
use crate::transport::{Endpoint, Envelope, MsgType};

#[derive(Debug, Clone)]
pub struct CoordinatorOptions {
    /// Longest wait for any single round (or registration).
    pub round_timeout: Duration,
    pub final_eval: bool,
    pub power: PowerModel,
    /// Shipped to clients at registration so remote processes can build
    /// their model and data.
    pub setup_config: Option<serde_json::Value>,
}

impl Default for CoordinatorOptions {
    fn default() -> Self {
        Self {
            round_timeout: Duration::from_secs(600),
            final_eval: true,
            power: PowerModel::default(),
            setup_config: None,
        }
    }
}

type Key = (MsgType, String, Option<ReportKind>);

fn key_of(env: &Envelope) -> Key {
    (env.msg_type, env.sender.clone(), report_kind(env))
}

pub struct Coordinator<'a> {
    mb: Mailbox<'a>,
    cfg: WorkflowConfig,
    clients: Vec<String>,
    init: ParameterSet,
    opts: CoordinatorOptions,
    ledger: RunLedger,
    records: Vec<RoundRecord>,
    sent_bytes: u64,
    sent_comm: f64,
}

impl<'a> Coordinator<'a> {
    /// `init` is the round-0 global model; `clients` fixes registration order.
    pub fn new(
        ep: &'a dyn Endpoint,
        cfg: WorkflowConfig,
        clients: Vec<String>,
        init: ParameterSet,
        opts: CoordinatorOptions,
    ) -> Self {
        let ledger = RunLedger::new(opts.power.clone());
        Self {
            mb: Mailbox::new(ep),
            cfg,
            clients,
            init,
            opts,
            ledger,
            records: Vec::new(),
            sent_bytes: 0,
            sent_comm: 0.0,
        }
    }

    fn me(&self) -> String {
        self.mb.id().to_owned()
    }

    pub fn run(mut self) -> Result<RunOutput> {
        let started = Instant::now();
        let outcome = self.drive();
        match outcome {
            Ok((final_model, orders, aggregators)) => {
                self.broadcast_abort(COMPLETE);
                self.ledger.wall_s = started.elapsed().as_secs_f64();
                self.ledger.config = self.opts.setup_config.clone();
                let overall = self.overall()?;
                Ok(RunOutput { final_model, ledger: self.ledger, records: self.records, overall, orders, aggregators })
            }
            Err(e) => {
                warn!(error = %e, "run failed, aborting clients");
                self.broadcast_abort(&e.to_string());
                Err(e)
            }
        }
    }

    fn drive(&mut self) -> Result<(ParameterSet, Vec<Vec<String>>, Vec<String>)> {
        self.cfg.validate()?;
        if self.clients.is_empty() {
            return Err(WorkflowError::InvalidConfig { path: "clients".into(), message: "no clients".into() });
        }
        if self.clients.iter().any(|c| c == self.mb.id()) {
            return Err(WorkflowError::InvalidConfig {
                path: "clients".into(),
                message: format!("client id `{}` is reserved", self.mb.id()),
            });
        }
        // Rejects stateful models under stateless-only policies before any traffic.
        Aggregator::new(self.cfg.aggregator.clone(), &self.init, &self.clients)
            .map_err(|source| WorkflowError::Aggregation { round: 0, source })?;
        self.register()?;
        let orders = resolve_orders(self.cfg.cyclic_order.as_ref(), &self.clients, self.cfg.num_rounds)?;
        let mut aggregators = Vec::new();
        let final_model = match self.cfg.kind {
            WorkflowKind::ScatterGather => self.scatter_gather()?,
            WorkflowKind::Cyclic => self.cyclic_relayed(&orders)?,
            WorkflowKind::DecentralizedCyclic => self.cyclic_p2p(&orders)?,
            WorkflowKind::Swarm => self.swarm(&mut aggregators)?,
        };
        if self.opts.final_eval {
            self.final_evaluation(&final_model)?;
        }
        let orders = if self.cfg.kind.is_cyclic() { orders } else { Vec::new() };
        Ok((final_model, orders, aggregators))
    }

    fn broadcast_abort(&mut self, reason: &str) {
        let me = self.me();
        for c in self.clients.clone() {
            let _ = self.mb.send(Envelope::new(MsgType::Abort, &me, &c, 0, reason.as_bytes().to_vec()));
        }
    }

    fn send(&mut self, msg_type: MsgType, to: &str, round: u32, payload: Vec<u8>) -> Result<()> {
        let me = self.me();
        self.mb.send(Envelope::new(msg_type, me, to, round, payload))?;
        Ok(())
    }

    fn task(&mut self, to: &str, round: u32, task: &Task) -> Result<()> {
        self.send(MsgType::TaskAssign, to, round, task.encode())
    }

    fn deadline(&self) -> Instant {
        Instant::now() + self.opts.round_timeout
    }

    fn register(&mut self) -> Result<()> {
        let deadline = self.deadline();
        let mut addrs: BTreeMap<String, Option<String>> = BTreeMap::new();
        while addrs.len() < self.clients.len() {
            let clients = self.clients.clone();
            let env = self
                .mb
                .take(deadline, |e| e.msg_type == MsgType::Register && clients.contains(&e.sender))
                .map_err(|e| self.take_error(e, 0, || first_missing(&clients, &addrs)))?;
            let reg: Register = serde_json::from_slice(&env.payload)
                .map_err(|e| WorkflowError::Protocol(format!("bad registration from {}: {e}", env.sender)))?;
            if let Some(addr) = &reg.addr {
                self.mb.endpoint().add_peer_addr(&env.sender, addr)?;
            }
            debug!(client = %env.sender, "registered");
            addrs.insert(env.sender, reg.addr);
        }
        let setup = Task::Setup { peers: addrs, config: self.opts.setup_config.clone() };
        for c in self.clients.clone() {
            self.task(&c, 0, &setup)?;
        }
        Ok(())
    }

    fn take_error(&self, e: TakeError, round: u32, missing: impl FnOnce() -> String) -> WorkflowError {
        match e {
            TakeError::Timeout => WorkflowError::ClientTimeout { client: missing(), round },
            TakeError::Aborted { by, reason } => WorkflowError::ClientFailed { client: by, reason },
            TakeError::Transport(t) => t.into(),
        }
    }

    /// Waits for every expected message of `round`; returns them sorted by key.
    fn collect(&mut self, round: u32, expect: Vec<Key>) -> Result<Vec<Envelope>> {
        self.collect_until(round, expect, self.deadline()).map_err(|(e, _)| e)
    }

    /// Like [`Self::collect`]; on failure also returns what was still missing.
    fn collect_until(
        &mut self,
        round: u32,
        expect: Vec<Key>,
        deadline: Instant,
    ) -> std::result::Result<Vec<Envelope>, (WorkflowError, Vec<Key>)> {
        let mut missing: BTreeSet<Key> = expect.into_iter().collect();
        let mut got = Vec::new();
        while !missing.is_empty() {
            let env = match self.mb.take(deadline, |e| e.round == round && missing.contains(&key_of(e))) {
                Ok(env) => env,
                Err(e) => {
                    let first = missing.iter().next().map(|k| k.1.clone()).unwrap_or_default();
                    let still: Vec<Key> = missing.into_iter().collect();
                    return Err((self.take_error(e, round, || first), still));
                }
            };
            missing.remove(&key_of(&env));
            got.push(env);
        }
        got.sort_by_key(key_of);
        Ok(got)
    }

    fn report_keys(&self, kind: ReportKind) -> Vec<Key> {
        self.clients.iter().map(|c| (MsgType::RoundBarrier, c.clone(), Some(kind))).collect()
    }

    fn reports(envs: &[Envelope]) -> Result<Vec<RoundReport>> {
        envs.iter().filter(|e| e.msg_type == MsgType::RoundBarrier).map(decode_report).collect()
    }

    /// Books one round (or the final evaluation) into the ledger and log.
    fn close_round(&mut self, round: Option<u32>, wall: f64, reports: &[RoundReport], own_busy: f64) -> Result<()> {
        let me = self.me();
        let mut busy: BTreeMap<String, f64> = BTreeMap::new();
        for r in reports {
            let node = r.client.as_str();
            for (phase, s) in
                [(Phase::Train, r.train_s), (Phase::Aggregate, r.aggregate_s), (Phase::Evaluate, r.eval_s)]
            {
                if s > 0.0 {
                    self.ledger.record_phase(node, round, phase, s, 0)?;
                }
            }
            self.ledger.record_phase(node, round, Phase::Communicate, r.comm_s, r.bytes_out)?;
            self.ledger.modeled_comm_s += r.comm_s;
            *busy.entry(r.client.clone()).or_default() += r.busy_s();
            if r.kind != ReportKind::Aggregate {
                self.records.push(RoundRecord {
                    round,
                    client: r.client.clone(),
                    num_samples: r.num_samples,
                    train_loss: r.train_loss,
                    steps: r.steps,
                    evaluation: r.evaluation.clone(),
                });
            }
        }
        for (node, b) in busy {
            self.ledger.record_phase(&node, round, Phase::Idle, (wall - b).max(0.0), 0)?;
        }
        let ep = self.mb.endpoint();
        let bytes = ep.stats().bytes_from(&me);
        let comm = ep.modeled_send_time();
        if own_busy > 0.0 {
            self.ledger.record_phase(&me, round, Phase::Aggregate, own_busy, 0)?;
        }
        self.ledger.record_phase(&me, round, Phase::Communicate, comm - self.sent_comm, bytes - self.sent_bytes)?;
        self.ledger.modeled_comm_s += comm - self.sent_comm;
        self.ledger.record_phase(&me, round, Phase::Idle, (wall - own_busy).max(0.0), 0)?;
        self.sent_bytes = bytes;
        self.sent_comm = comm;
        Ok(())
    }

    fn scatter_gather(&mut self) -> Result<ParameterSet> {
        let me = self.me();
        let mut agg = Aggregator::new(self.cfg.aggregator.clone(), &self.init, &self.clients)
            .map_err(|source| WorkflowError::Aggregation { round: 0, source })?;
        let scaffold = self.cfg.aggregator.algorithm == Algorithm::Scaffold;
        let mut global = self.init.clone();
        for t in 0..self.cfg.num_rounds {
            let start = Instant::now();
            let payload = global.serialize();
            let train = Task::Train {
                source: Source::Peer(me.clone()),
                variates: if scaffold { VariateSource::Peer(me.clone()) } else { VariateSource::None },
                deliver: Delivery::Result { to: me.clone() },
            };
            for c in self.clients.clone() {
                self.task(&c, t, &train)?;
                self.send(MsgType::ModelPayload, &c, t, payload.clone())?;
                if let Some(v) = agg.variates() {
                    let ci = v.client(&c).expect("registered client").clone();
                    self.send(MsgType::VariatePayload, &c, t, encode_variates(v.global(), &ci))?;
                }
            }
            let mut expect = self.report_keys(ReportKind::Train);
            expect.extend(self.clients.iter().map(|c| (MsgType::ResultSubmit, c.clone(), None)));
            let envs = self.collect(t, expect)?;
            let updates = envs
                .iter()
                .filter(|e| e.msg_type == MsgType::ResultSubmit)
                .map(decode_result)
                .collect::<Result<Vec<_>>>()?;
            let agg_start = Instant::now();
            global =
                agg.aggregate(&global, &updates).map_err(|source| WorkflowError::Aggregation { round: t, source })?;
            let agg_s = agg_start.elapsed().as_secs_f64();
            info!(round = t, "aggregated {} updates", updates.len());
            self.close_round(Some(t), start.elapsed().as_secs_f64(), &Self::reports(&envs)?, agg_s)?;
        }
        Ok(global)
    }

    fn cyclic_relayed(&mut self, orders: &[Vec<String>]) -> Result<ParameterSet> {
        let me = self.me();
        let mut model = self.init.clone();
        for (t, order) in (0..self.cfg.num_rounds).zip(orders) {
            let start = Instant::now();
            let train = Task::Train {
                source: Source::Peer(me.clone()),
                variates: VariateSource::None,
                deliver: Delivery::Result { to: me.clone() },
            };
            for c in order {
                self.task(c, t, &train)?;
                self.send(MsgType::ModelPayload, c, t, model.serialize())?;
                let envs = self.collect(t, vec![(MsgType::ResultSubmit, c.clone(), None)])?;
                model = decode_result(&envs[0])?.weights;
            }
            let envs = self.collect(t, self.report_keys(ReportKind::Train))?;
            self.close_round(Some(t), start.elapsed().as_secs_f64(), &Self::reports(&envs)?, 0.0)?;
        }
        Ok(model)
    }

    fn cyclic_p2p(&mut self, orders: &[Vec<String>]) -> Result<ParameterSet> {
        let me = self.me();
        let rounds = self.cfg.num_rounds;
        let mut final_model = None;
        for (t, order) in (0..rounds).zip(orders) {
            let start = Instant::now();
            for (i, c) in order.iter().enumerate() {
                let source = match (i, t) {
                    (0, 0) => Source::Init,
                    (0, _) => Source::Peer(orders[t as usize - 1].last().expect("nonempty order").clone()),
                    _ => Source::Peer(order[i - 1].clone()),
                };
                let deliver = if i + 1 < order.len() {
                    Delivery::Relay { to: order[i + 1].clone(), round: t }
                } else if t + 1 < rounds {
                    Delivery::Relay { to: orders[t as usize + 1][0].clone(), round: t + 1 }
                } else {
                    Delivery::Relay { to: me.clone(), round: t }
                };
                self.task(c, t, &Task::Train { source, variates: VariateSource::None, deliver })?;
            }
            let mut expect = self.report_keys(ReportKind::Train);
            let last = order.last().expect("nonempty order").clone();
            if t + 1 == rounds {
                expect.push((MsgType::ModelPayload, last, None));
            }
            let envs = self.collect(t, expect)?;
            if let Some(env) = envs.iter().find(|e| e.msg_type == MsgType::ModelPayload) {
                final_model = Some(ParameterSet::deserialize(&env.payload)?);
            }
            self.close_round(Some(t), start.elapsed().as_secs_f64(), &Self::reports(&envs)?, 0.0)?;
        }
        final_model.ok_or_else(|| WorkflowError::Protocol("no final model received".into()))
    }

    fn swarm(&mut self, aggregators: &mut Vec<String>) -> Result<ParameterSet> {
        let me = self.me();
        let rounds = self.cfg.num_rounds;
        let scaffold = self.cfg.aggregator.algorithm == Algorithm::Scaffold;
        let mut prev: Option<String> = None;
        let mut failed: BTreeSet<String> = BTreeSet::new();
        let mut reelected = false;
        let mut final_model = None;
        for t in 0..rounds {
            let start = Instant::now();
            let mut a = self.next_aggregator(t, &failed)?;
            if let Some(p) = prev.as_ref().filter(|p| **p != a) {
                self.task(&p.clone(), t, &Task::HandState { to: a.clone() })?;
            }
            let (source, variates) = match &prev {
                None => (Source::Init, if scaffold { VariateSource::Zero } else { VariateSource::None }),
                Some(p) => (
                    Source::Peer(p.clone()),
                    if scaffold { VariateSource::Peer(p.clone()) } else { VariateSource::None },
                ),
            };
            let train = Task::Train { source, variates, deliver: Delivery::Result { to: a.clone() } };
            for c in self.clients.clone() {
                self.task(&c, t, &train)?;
            }
            let then =
                if t + 1 < rounds { AfterAggregate::Broadcast } else { AfterAggregate::Final { to: me.clone() } };
            let participants = self.clients.clone();
            let aggregate = |a: &str| Task::Aggregate {
                participants: participants.clone(),
                state_from: prev.clone().filter(|p| p != a),
                then: then.clone(),
            };
            let task = aggregate(&a);
            self.task(&a.clone(), t, &task)?;

            let mut envs = self.collect(t, self.report_keys(ReportKind::Train))?;
            let aggregator_keys = |a: &str| {
                let mut k = vec![(MsgType::RoundBarrier, a.to_owned(), Some(ReportKind::Aggregate))];
                if t + 1 == rounds {
                    k.push((MsgType::ModelPayload, a.to_owned(), None));
                }
                k
            };
            let got = match self.collect_until(t, aggregator_keys(&a), self.deadline()) {
                Ok(got) => got,
                Err((WorkflowError::ClientTimeout { client, .. }, _)) if !reelected => {
                    warn!(round = t, aggregator = %client, "aggregator unresponsive, re-electing");
                    reelected = true;
                    failed.insert(a.clone());
                    if prev.as_deref() == Some(a.as_str()) {
                        return Err(WorkflowError::AggregatorClientFailure { client: a, round: t });
                    }
                    let failed_node = a.clone();
                    a = self.next_aggregator(t, &failed).map_err(|_| WorkflowError::AggregatorClientFailure {
                        client: failed_node.clone(),
                        round: t,
                    })?;
                    if let Some(p) = prev.as_ref().filter(|p| **p != a) {
                        self.task(&p.clone(), t, &Task::HandState { to: a.clone() })?;
                    }
                    for c in self.clients.clone() {
                        self.task(&c, t, &Task::Resend { to: a.clone() })?;
                    }
                    let task = aggregate(&a);
                    self.task(&a.clone(), t, &task)?;
                    self.collect_until(t, aggregator_keys(&a), self.deadline()).map_err(|(e, _)| match e {
                        WorkflowError::ClientTimeout { client, round } => {
                            WorkflowError::AggregatorClientFailure { client, round }
                        }
                        other => other,
                    })?
                }
                Err((WorkflowError::ClientTimeout { client, round }, _)) => {
                    return Err(WorkflowError::AggregatorClientFailure { client, round })
                }
                Err((e, _)) => return Err(e),
            };
            if let Some(env) = got.iter().find(|e| e.msg_type == MsgType::ModelPayload) {
                final_model = Some(ParameterSet::deserialize(&env.payload)?);
            }
            envs.extend(got);
            self.close_round(Some(t), start.elapsed().as_secs_f64(), &Self::reports(&envs)?, 0.0)?;
            aggregators.push(a.clone());
            prev = Some(a);
        }
        final_model.ok_or_else(|| WorkflowError::Protocol("no final model received".into()))
    }

    fn next_aggregator(&self, round: u32, failed: &BTreeSet<String>) -> Result<String> {
        let n = self.clients.len() as u32;
        (0..n)
            .map(|k| elect(&self.clients, round + k).to_owned())
            .find(|c| !failed.contains(c))
            .ok_or_else(|| WorkflowError::AggregatorClientFailure { client: elect(&self.clients, round).into(), round })
    }

    fn final_evaluation(&mut self, model: &ParameterSet) -> Result<()> {
        let me = self.me();
        let round = self.cfg.num_rounds;
        let start = Instant::now();
        let payload = model.serialize();
        for c in self.clients.clone() {
            self.task(&c, round, &Task::Evaluate { source: me.clone() })?;
            self.send(MsgType::ModelPayload, &c, round, payload.clone())?;
        }
        let envs = self.collect(round, self.report_keys(ReportKind::Evaluate))?;
        self.close_round(None, start.elapsed().as_secs_f64(), &Self::reports(&envs)?, 0.0)
    }

    fn overall(&self) -> Result<Option<metrics::MetricReport>> {
        let finals: Vec<(&metrics::MetricReport, f64)> = self
            .records
            .iter()
            .filter(|r| r.round.is_none())
            .filter_map(|r| r.evaluation.as_ref())
            .filter_map(|e| e.report.as_ref().map(|rep| (rep, e.samples as f64)))
            .collect();
        if finals.is_empty() {
            return Ok(None);
        }
        metrics::overall(&finals).map(Some).map_err(|e| WorkflowError::Model(e.into()))
    }
}

fn first_missing(clients: &[String], have: &BTreeMap<String, Option<String>>) -> String {
    clients.iter().find(|c| !have.contains_key(*c)).cloned().unwrap_or_default()
}
