//! Message layer: envelopes, the `FFEV` wire frame, an in-process bus and a
//! TCP backend behind one [`Endpoint`] trait.

mod bus;
mod frame;
mod tcp;

pub use bus::{BusEndpoint, InProcessBus, LinkModel, TraceRecord};
pub use frame::{frame, frame_len, unframe, FrameReader, FRAME_OVERHEAD, MAX_FRAME_LEN};
pub use tcp::TcpEndpoint;

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("timed out waiting for a message on `{0}`")]
    Timeout(String),
    #[error("peer `{0}` disconnected")]
    PeerDisconnected(String),
    #[error("payload checksum mismatch on message from `{sender}` (round {round})")]
    CrcMismatch { sender: String, round: u32 },
    #[error("malformed frame at byte {offset}: {reason}")]
    MalformedFrame { offset: usize, reason: String },
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, TransportError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MsgType {
    Register,
    TaskAssign,
    ModelPayload,
    ResultSubmit,
    VariatePayload,
    RoundBarrier,
    Heartbeat,
    Abort,
}

impl MsgType {
    pub const ALL: [MsgType; 8] = [
        MsgType::Register,
        MsgType::TaskAssign,
        MsgType::ModelPayload,
        MsgType::ResultSubmit,
        MsgType::VariatePayload,
        MsgType::RoundBarrier,
        MsgType::Heartbeat,
        MsgType::Abort,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub msg_type: MsgType,
    pub sender: String,
    pub recipient: String,
    pub round: u32,
    pub payload: Vec<u8>,
    pub payload_crc: u32,
}

impl Envelope {
    pub fn new(
        msg_type: MsgType,
        sender: impl Into<String>,
        recipient: impl Into<String>,
        round: u32,
        payload: Vec<u8>,
    ) -> Self {
        let payload_crc = crc32fast::hash(&payload);
        Self { msg_type, sender: sender.into(), recipient: recipient.into(), round, payload, payload_crc }
    }

    pub fn crc_ok(&self) -> bool {
        crc32fast::hash(&self.payload) == self.payload_crc
    }

    /// Size of this envelope on the wire.
    pub fn wire_len(&self) -> usize {
        frame_len(&self.sender, &self.recipient, self.payload.len())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkStats {
    pub messages: u64,
    pub bytes: u64,
    /// Modeled transfer time in seconds.
    pub latency_s: f64,
}

/// Counters per (sender, recipient) pair.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub links: BTreeMap<(String, String), LinkStats>,
}

impl ChannelStats {
    pub fn record(&mut self, sender: &str, recipient: &str, bytes: u64, latency_s: f64) {
        let link = self.links.entry((sender.to_owned(), recipient.to_owned())).or_default();
        link.messages += 1;
        link.bytes += bytes;
        link.latency_s += latency_s;
    }

    pub fn total_bytes(&self) -> u64 {
        self.links.values().map(|l| l.bytes).sum()
    }

    pub fn total_messages(&self) -> u64 {
        self.links.values().map(|l| l.messages).sum()
    }

    pub fn bytes_from(&self, sender: &str) -> u64 {
        self.links.iter().filter(|((s, _), _)| s == sender).map(|(_, l)| l.bytes).sum()
    }

    pub fn latency_from(&self, sender: &str) -> f64 {
        self.links.iter().filter(|((s, _), _)| s == sender).map(|(_, l)| l.latency_s).sum()
    }

    pub fn link(&self, sender: &str, recipient: &str) -> LinkStats {
        self.links.get(&(sender.to_owned(), recipient.to_owned())).copied().unwrap_or_default()
    }
}

/// One node's view of the network: it sends to any node and owns one
/// receive queue.
pub trait Endpoint: Send + Sync {
    fn id(&self) -> &str;

    fn send(&self, env: Envelope) -> Result<()>;

    /// Next message for this node; a payload that fails its checksum is
    /// surfaced as [`TransportError::CrcMismatch`].
    fn recv(&self, timeout: Duration) -> Result<Envelope>;

    /// Traffic sent by this node.
    fn stats(&self) -> ChannelStats;

    /// Modeled seconds this node has spent sending that are not part of
    /// measured wall time.
    fn modeled_send_time(&self) -> f64 {
        self.stats().latency_from(self.id())
    }

    /// Address peers can reach this node at, for backends that need one.
    fn advertised_addr(&self) -> Option<String> {
        None
    }

    fn add_peer_addr(&self, _id: &str, _addr: &str) -> Result<()> {
        Ok(())
    }
}
