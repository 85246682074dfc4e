//! Payload encodings for workflow messages and a mailbox that lets a node
//! wait for one specific message while stashing everything else.

use std::collections::{BTreeMap, VecDeque};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::WorkflowError;
use crate::models::{ClientUpdate, Evaluation};
use crate::params::ParameterSet;
use crate::transport::{Endpoint, Envelope, MsgType, TransportError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub(crate) enum Source {
    Init,
    Peer(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub(crate) enum VariateSource {
    None,
    Zero,
    Peer(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub(crate) enum Delivery {
    /// Submit weights (and variate) as a training result.
    Result { to: String },
    /// Forward the trained weights as the next model, tagged with `round`.
    Relay { to: String, round: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub(crate) enum AfterAggregate {
    Broadcast,
    Final { to: String },
}

/// Control payload of a `TaskAssign` message; the round is the envelope's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub(crate) enum Task {
    Setup { peers: BTreeMap<String, Option<String>>, config: Option<serde_json::Value> },
    Train { source: Source, variates: VariateSource, deliver: Delivery },
    Aggregate { participants: Vec<String>, state_from: Option<String>, then: AfterAggregate },
    HandState { to: String },
    Resend { to: String },
    Evaluate { source: String },
}

impl Task {
    pub(crate) fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("task serializes")
    }

    pub(crate) fn decode(bytes: &[u8]) -> Result<Self, WorkflowError> {
        serde_json::from_slice(bytes).map_err(|e| WorkflowError::Protocol(format!("bad task payload: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Register {
    pub addr: Option<String>,
}

fn put_blob(out: &mut Vec<u8>, blob: &[u8]) {
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(blob);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn err(&self) -> WorkflowError {
        WorkflowError::Protocol(format!("truncated {} payload at byte {}", self.what, self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WorkflowError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WorkflowError> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64, WorkflowError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, WorkflowError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn blob(&mut self) -> Result<&'a [u8], WorkflowError> {
        let n = u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize;
        self.take(n)
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        s
    }

    fn done(&self) -> Result<(), WorkflowError> {
        if self.pos != self.bytes.len() {
            return Err(WorkflowError::Protocol(format!("trailing bytes in {} payload", self.what)));
        }
        Ok(())
    }
}

pub(crate) fn encode_result(update: &ClientUpdate) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&update.num_samples.to_le_bytes());
    out.extend_from_slice(&update.train_loss.to_le_bytes());
    out.extend_from_slice(&update.steps.to_le_bytes());
    put_blob(&mut out, &update.weights.serialize());
    match &update.variate {
        Some(v) => {
            out.push(1);
            put_blob(&mut out, &v.serialize());
        }
        None => out.push(0),
    }
    out
}

pub(crate) fn decode_result(env: &Envelope) -> Result<ClientUpdate, WorkflowError> {
    let mut r = Reader::new(&env.payload, "result");
    let num_samples = r.u64()?;
    let train_loss = r.f64()?;
    let steps = r.u64()?;
    let weights = ParameterSet::deserialize(r.blob()?)?;
    let variate = match r.u8()? {
        0 => None,
        _ => Some(ParameterSet::deserialize(r.blob()?)?),
    };
    r.done()?;
    Ok(ClientUpdate { client: env.sender.clone(), round: env.round, num_samples, weights, variate, train_loss, steps })
}

const VARIATE_PAIR: u8 = 0;
const AGGREGATOR_STATE: u8 = 1;

pub(crate) fn encode_variates(global: &ParameterSet, client: &ParameterSet) -> Vec<u8> {
    let mut out = vec![VARIATE_PAIR];
    put_blob(&mut out, &global.serialize());
    put_blob(&mut out, &client.serialize());
    out
}

/// Returns `(global, client)`.
pub(crate) fn decode_variates(payload: &[u8]) -> Result<(ParameterSet, ParameterSet), WorkflowError> {
    let mut r = Reader::new(payload, "variate");
    if r.u8()? != VARIATE_PAIR {
        return Err(WorkflowError::Protocol("expected a variate pair".into()));
    }
    let global = ParameterSet::deserialize(r.blob()?)?;
    let client = ParameterSet::deserialize(r.blob()?)?;
    r.done()?;
    Ok((global, client))
}

pub(crate) fn encode_state(state: &[u8]) -> Vec<u8> {
    let mut out = vec![AGGREGATOR_STATE];
    out.extend_from_slice(state);
    out
}

pub(crate) fn is_state(env: &Envelope) -> bool {
    env.msg_type == MsgType::VariatePayload && env.payload.first() == Some(&AGGREGATOR_STATE)
}

pub(crate) fn is_variate_pair(env: &Envelope) -> bool {
    env.msg_type == MsgType::VariatePayload && env.payload.first() == Some(&VARIATE_PAIR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ReportKind {
    Train,
    Aggregate,
    Evaluate,
}

impl ReportKind {
    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        [ReportKind::Train, ReportKind::Aggregate, ReportKind::Evaluate].get(c as usize).copied()
    }
}

/// What a client tells the coordinator at the end of each piece of work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub kind: ReportKind,
    pub client: String,
    pub round: u32,
    /// Bytes sent since the previous report, including this report.
    pub bytes_out: u64,
    pub msgs_out: u64,
    pub comm_s: f64,
    pub train_s: f64,
    pub eval_s: f64,
    pub aggregate_s: f64,
    pub num_samples: u64,
    pub train_loss: f64,
    pub steps: u64,
    pub evaluation: Option<Evaluation>,
}

impl RoundReport {
    pub(crate) fn busy_s(&self) -> f64 {
        self.train_s + self.eval_s + self.aggregate_s
    }
}

pub(crate) const REPORT_HEADER: usize = 1 + 8 * 9;

pub(crate) fn encode_report(r: &RoundReport) -> Vec<u8> {
    let mut out = Vec::with_capacity(REPORT_HEADER + 256);
    out.push(r.kind.code());
    out.extend_from_slice(&r.bytes_out.to_le_bytes());
    out.extend_from_slice(&r.msgs_out.to_le_bytes());
    for v in [r.comm_s, r.train_s, r.eval_s, r.aggregate_s] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&r.num_samples.to_le_bytes());
    out.extend_from_slice(&r.train_loss.to_le_bytes());
    out.extend_from_slice(&r.steps.to_le_bytes());
    out.extend(serde_json::to_vec(&r.evaluation).expect("evaluation serializes"));
    out
}

pub(crate) fn decode_report(env: &Envelope) -> Result<RoundReport, WorkflowError> {
    let mut r = Reader::new(&env.payload, "report");
    let kind = ReportKind::from_code(r.u8()?).ok_or_else(|| WorkflowError::Protocol("unknown report kind".into()))?;
    let bytes_out = r.u64()?;
    let msgs_out = r.u64()?;
    let comm_s = r.f64()?;
    let train_s = r.f64()?;
    let eval_s = r.f64()?;
    let aggregate_s = r.f64()?;
    let num_samples = r.u64()?;
    let train_loss = r.f64()?;
    let steps = r.u64()?;
    let evaluation = serde_json::from_slice(r.rest())
        .map_err(|e| WorkflowError::Protocol(format!("bad evaluation in report: {e}")))?;
    Ok(RoundReport {
        kind,
        client: env.sender.clone(),
        round: env.round,
        bytes_out,
        msgs_out,
        comm_s,
        train_s,
        eval_s,
        aggregate_s,
        num_samples,
        train_loss,
        steps,
        evaluation,
    })
}

pub(crate) fn report_kind(env: &Envelope) -> Option<ReportKind> {
    if env.msg_type != MsgType::RoundBarrier {
        return None;
    }
    env.payload.first().and_then(|&c| ReportKind::from_code(c))
}

pub(crate) const COMPLETE: &str = "complete";

pub(crate) enum TakeError {
    Timeout,
    Aborted { by: String, reason: String },
    Transport(TransportError),
}

/// A node's receive side plus the messages it has set aside.
pub(crate) struct Mailbox<'a> {
    ep: &'a dyn Endpoint,
    pending: VecDeque<Envelope>,
}

impl<'a> Mailbox<'a> {
    pub(crate) fn new(ep: &'a dyn Endpoint) -> Self {
        Self { ep, pending: VecDeque::new() }
    }

    pub(crate) fn endpoint(&self) -> &'a dyn Endpoint {
        self.ep
    }

    pub(crate) fn id(&self) -> &str {
        self.ep.id()
    }

    /// Messages to self bypass the transport and cost nothing.
    pub(crate) fn send(&mut self, env: Envelope) -> Result<(), TransportError> {
        if env.recipient == self.ep.id() {
            self.pending.push_back(env);
            Ok(())
        } else {
            self.ep.send(env)
        }
    }

    pub(crate) fn take(
        &mut self,
        deadline: Instant,
        mut pred: impl FnMut(&Envelope) -> bool,
    ) -> Result<Envelope, TakeError> {
        if let Some(i) = self.pending.iter().position(&mut pred) {
            return Ok(self.pending.remove(i).expect("index in range"));
        }
        loop {
            let now = Instant::now();
            if now >= deadline {
                return Err(TakeError::Timeout);
            }
            let env = match self.ep.recv(deadline - now) {
                Ok(env) => env,
                Err(TransportError::Timeout(_)) => return Err(TakeError::Timeout),
                Err(e) => return Err(TakeError::Transport(e)),
            };
            if env.msg_type == MsgType::Abort {
                return Err(TakeError::Aborted {
                    by: env.sender,
                    reason: String::from_utf8_lossy(&env.payload).into(),
                });
            }
            if pred(&env) {
                return Ok(env);
            }
            self.pending.push_back(env);
        }
    }

    /// Drops stashed messages from rounds before `round`.
    pub(crate) fn purge_before(&mut self, round: u32) {
        self.pending.retain(|e| e.round >= round);
    }
}
