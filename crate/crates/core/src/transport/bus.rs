//! In-process message bus. Envelopes travel as framed bytes over crossbeam
//! channels; link latency and bandwidth are modeled, never slept.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use serde::{Deserialize, Serialize};

use super::{frame, unframe, ChannelStats, Endpoint, Envelope, MsgType, Result, TransportError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkModel {
    pub latency_s: f64,
    pub bandwidth_bytes_per_s: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        Self { latency_s: 0.0005, bandwidth_bytes_per_s: 125e6 }
    }
}

impl LinkModel {
    pub fn transfer_time(&self, bytes: usize) -> f64 {
        self.latency_s + bytes as f64 / self.bandwidth_bytes_per_s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub msg_type: MsgType,
    pub sender: String,
    pub recipient: String,
    pub round: u32,
    pub bytes: usize,
}

#[derive(Default)]
struct Inner {
    queues: HashMap<String, Sender<Vec<u8>>>,
    known: BTreeSet<String>,
    stats: ChannelStats,
    links: BTreeMap<(String, String), LinkModel>,
    trace: Option<Vec<TraceRecord>>,
}

#[derive(Clone)]
pub struct InProcessBus {
    inner: Arc<Mutex<Inner>>,
    default_link: LinkModel,
}

impl Default for InProcessBus {
    fn default() -> Self {
        Self::new(LinkModel::default())
    }
}

impl InProcessBus {
    pub fn new(default_link: LinkModel) -> Self {
        Self { inner: Arc::default(), default_link }
    }

    /// Records every delivered message for later inspection.
    pub fn with_trace(self) -> Self {
        self.lock().trace = Some(Vec::new());
        self
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().expect("bus lock poisoned")
    }

    pub fn set_link(&self, sender: &str, recipient: &str, link: LinkModel) {
        self.lock().links.insert((sender.to_owned(), recipient.to_owned()), link);
    }

    /// Registers `id` and returns its endpoint; re-registering replaces the queue.
    pub fn endpoint(&self, id: &str) -> BusEndpoint {
        let (tx, rx) = unbounded();
        let mut inner = self.lock();
        inner.queues.insert(id.to_owned(), tx);
        inner.known.insert(id.to_owned());
        BusEndpoint { id: id.to_owned(), bus: self.clone(), rx }
    }

    /// Drops the node's queue: sends to it fail and its pending receive ends.
    pub fn disconnect(&self, id: &str) {
        self.lock().queues.remove(id);
    }

    pub fn stats(&self) -> ChannelStats {
        self.lock().stats.clone()
    }

    pub fn trace(&self) -> Vec<TraceRecord> {
        self.lock().trace.clone().unwrap_or_default()
    }

    /// Delivers raw bytes to `recipient` without framing or accounting.
    pub fn inject_raw(&self, recipient: &str, bytes: Vec<u8>) -> Result<()> {
        let inner = self.lock();
        let tx = inner.queues.get(recipient).ok_or_else(|| TransportError::UnknownNode(recipient.to_owned()))?;
        tx.send(bytes).map_err(|_| TransportError::PeerDisconnected(recipient.to_owned()))
    }

    fn deliver(&self, env: &Envelope) -> Result<()> {
        let bytes = frame(env);
        let mut inner = self.lock();
        let tx = match inner.queues.get(&env.recipient) {
            Some(tx) => tx.clone(),
            None if inner.known.contains(&env.recipient) => {
                return Err(TransportError::PeerDisconnected(env.recipient.clone()))
            }
            None => return Err(TransportError::UnknownNode(env.recipient.clone())),
        };
        let link = inner.links.get(&(env.sender.clone(), env.recipient.clone())).copied().unwrap_or(self.default_link);
        let len = bytes.len();
        tx.send(bytes).map_err(|_| TransportError::PeerDisconnected(env.recipient.clone()))?;
        inner.stats.record(&env.sender, &env.recipient, len as u64, link.transfer_time(len));
        if let Some(trace) = inner.trace.as_mut() {
            trace.push(TraceRecord {
                msg_type: env.msg_type,
                sender: env.sender.clone(),
                recipient: env.recipient.clone(),
                round: env.round,
                bytes: len,
            });
        }
        Ok(())
    }
}

pub struct BusEndpoint {
    id: String,
    bus: InProcessBus,
    rx: Receiver<Vec<u8>>,
}

impl BusEndpoint {
    pub fn bus(&self) -> &InProcessBus {
        &self.bus
    }
}

impl Endpoint for BusEndpoint {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, env: Envelope) -> Result<()> {
        self.bus.deliver(&env)
    }

    fn recv(&self, timeout: Duration) -> Result<Envelope> {
        let bytes = match self.rx.recv_timeout(timeout) {
            Ok(b) => b,
            Err(RecvTimeoutError::Timeout) => return Err(TransportError::Timeout(self.id.clone())),
            Err(RecvTimeoutError::Disconnected) => return Err(TransportError::PeerDisconnected(self.id.clone())),
        };
        let (env, _) = unframe(&bytes)?;
        if !env.crc_ok() {
            return Err(TransportError::CrcMismatch { sender: env.sender, round: env.round });
        }
        Ok(env)
    }

    fn stats(&self) -> ChannelStats {
        let all = self.bus.stats();
        ChannelStats { links: all.links.into_iter().filter(|((s, _), _)| *s == self.id).collect() }
    }
}
