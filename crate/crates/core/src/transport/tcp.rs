//! Stream-socket backend. Every node listens on one address; outbound
//! connections are opened lazily per peer and reused.

use std::collections::HashMap;
use std::io::{BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use tracing::{debug, warn};

use super::{frame, ChannelStats, Endpoint, Envelope, FrameReader, Result, TransportError};

pub struct TcpEndpoint {
    id: String,
    local_addr: SocketAddr,
    rx: Receiver<Result<Envelope>>,
    peers: Mutex<HashMap<String, SocketAddr>>,
    conns: Mutex<HashMap<String, TcpStream>>,
    stats: Mutex<ChannelStats>,
    closing: Arc<AtomicBool>,
}

fn io_err(e: std::io::Error) -> TransportError {
    TransportError::Io(e.to_string())
}

impl TcpEndpoint {
    /// Binds `addr` (port 0 picks a free port) and starts accepting peers.
    pub fn bind(id: &str, addr: impl ToSocketAddrs) -> Result<Self> {
        let listener = TcpListener::bind(addr).map_err(io_err)?;
        let local_addr = listener.local_addr().map_err(io_err)?;
        let (tx, rx) = unbounded();
        let closing = Arc::new(AtomicBool::new(false));
        let flag = closing.clone();
        let owner = id.to_owned();
        thread::Builder::new()
            .name(format!("accept-{id}"))
            .spawn(move || accept_loop(listener, tx, flag, owner))
            .map_err(io_err)?;
        Ok(Self {
            id: id.to_owned(),
            local_addr,
            rx,
            peers: Mutex::default(),
            conns: Mutex::default(),
            stats: Mutex::default(),
            closing,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn add_peer(&self, id: &str, addr: SocketAddr) {
        self.peers.lock().expect("peer lock").insert(id.to_owned(), addr);
    }

    pub fn peer_addr(&self, id: &str) -> Option<SocketAddr> {
        self.peers.lock().expect("peer lock").get(id).copied()
    }

    fn connect(&self, recipient: &str) -> Result<TcpStream> {
        let addr = self.peer_addr(recipient).ok_or_else(|| TransportError::UnknownNode(recipient.to_owned()))?;
        let stream = TcpStream::connect_timeout(&addr, Duration::from_secs(5))
            .map_err(|_| TransportError::PeerDisconnected(recipient.to_owned()))?;
        stream.set_nodelay(true).map_err(io_err)?;
        Ok(stream)
    }

    fn write_once(&self, recipient: &str, bytes: &[u8]) -> Result<()> {
        let mut conns = self.conns.lock().expect("conn lock");
        if !conns.contains_key(recipient) {
            let stream = self.connect(recipient)?;
            conns.insert(recipient.to_owned(), stream);
        }
        let stream = conns.get_mut(recipient).expect("inserted");
        let result = stream.write_all(bytes).and_then(|_| stream.flush());
        if result.is_err() {
            conns.remove(recipient);
            return Err(TransportError::PeerDisconnected(recipient.to_owned()));
        }
        Ok(())
    }
}

fn accept_loop(listener: TcpListener, tx: Sender<Result<Envelope>>, closing: Arc<AtomicBool>, owner: String) {
    for stream in listener.incoming() {
        if closing.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!(node = %owner, error = %e, "accept failed");
                continue;
            }
        };
        let tx = tx.clone();
        let reader_owner = owner.clone();
        let spawned = thread::Builder::new().name(format!("read-{reader_owner}")).spawn(move || {
            let mut reader = FrameReader::new(BufReader::new(stream));
            loop {
                match reader.next_frame() {
                    Ok(Some(env)) => {
                        let item = if env.crc_ok() {
                            Ok(env)
                        } else {
                            Err(TransportError::CrcMismatch { sender: env.sender, round: env.round })
                        };
                        if tx.send(item).is_err() {
                            break;
                        }
                    }
                    Ok(None) => break,
                    Err(e) => {
                        debug!(node = %reader_owner, error = %e, "dropping connection");
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        });
        if let Err(e) = spawned {
            warn!(node = %owner, error = %e, "could not spawn reader");
        }
    }
}

impl Endpoint for TcpEndpoint {
    fn id(&self) -> &str {
        &self.id
    }

    /// Retries once on a fresh connection.
    fn send(&self, env: Envelope) -> Result<()> {
        let bytes = frame(&env);
        let start = Instant::now();
        if let Err(first) = self.write_once(&env.recipient, &bytes) {
            if matches!(first, TransportError::UnknownNode(_)) {
                return Err(first);
            }
            debug!(node = %self.id, peer = %env.recipient, "retrying send");
            self.write_once(&env.recipient, &bytes)?;
        }
        let elapsed = start.elapsed().as_secs_f64();
        self.stats.lock().expect("stats lock").record(&env.sender, &env.recipient, bytes.len() as u64, elapsed);
        Ok(())
    }

    fn recv(&self, timeout: Duration) -> Result<Envelope> {
        match self.rx.recv_timeout(timeout) {
            Ok(item) => item,
            Err(RecvTimeoutError::Timeout) => Err(TransportError::Timeout(self.id.clone())),
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::PeerDisconnected(self.id.clone())),
        }
    }

    fn stats(&self) -> ChannelStats {
        self.stats.lock().expect("stats lock").clone()
    }

    /// Socket time is already part of measured wall time.
    fn modeled_send_time(&self) -> f64 {
        0.0
    }

    fn advertised_addr(&self) -> Option<String> {
        Some(self.local_addr.to_string())
    }

    fn add_peer_addr(&self, id: &str, addr: &str) -> Result<()> {
        let parsed = addr
            .to_socket_addrs()
            .map_err(io_err)?
            .next()
            .ok_or_else(|| TransportError::Io(format!("address `{addr}` did not resolve")))?;
        self.add_peer(id, parsed);
        Ok(())
    }
}

impl Drop for TcpEndpoint {
    fn drop(&mut self) {
        self.closing.store(true, Ordering::SeqCst);
        if let Ok(conns) = self.conns.lock() {
            for stream in conns.values() {
                let _ = stream.shutdown(Shutdown::Both);
            }
        }
        // Wake the accept loop so it observes the flag.
        let _ = TcpStream::connect_timeout(&self.local_addr, Duration::from_millis(200));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::MsgType;

    #[test]
    fn two_nodes_exchange_in_order() {
        let a = TcpEndpoint::bind("a", "127.0.0.1:0").unwrap();
        let b = TcpEndpoint::bind("b", "127.0.0.1:0").unwrap();
        a.add_peer("b", b.local_addr());
        b.add_peer("a", a.local_addr());
        for round in 0..50 {
            a.send(Envelope::new(MsgType::ModelPayload, "a", "b", round, vec![round as u8; 300])).unwrap();
        }
        for round in 0..50 {
            let env = b.recv(Duration::from_secs(5)).unwrap();
            assert_eq!(env.round, round);
            assert_eq!(env.payload, vec![round as u8; 300]);
        }
        b.send(Envelope::new(MsgType::Heartbeat, "b", "a", 0, vec![])).unwrap();
        assert_eq!(a.recv(Duration::from_secs(5)).unwrap().sender, "b");
        let expected = Envelope::new(MsgType::ModelPayload, "a", "b", 0, vec![0; 300]).wire_len() as u64 * 50;
        assert_eq!(a.stats().bytes_from("a"), expected);
    }

    #[test]
    fn unknown_peer_and_timeout() {
        let a = TcpEndpoint::bind("a", "127.0.0.1:0").unwrap();
        assert_eq!(
            a.send(Envelope::new(MsgType::Heartbeat, "a", "nobody", 0, vec![])),
            Err(TransportError::UnknownNode("nobody".into()))
        );
        assert_eq!(a.recv(Duration::from_millis(10)), Err(TransportError::Timeout("a".into())));
    }

    #[test]
    fn closed_peer_reports_disconnect() {
        let a = TcpEndpoint::bind("a", "127.0.0.1:0").unwrap();
        let addr = {
            let b = TcpEndpoint::bind("b", "127.0.0.1:0").unwrap();
            b.local_addr()
        };
        thread::sleep(Duration::from_millis(50));
        a.add_peer("b", addr);
        let err = a.send(Envelope::new(MsgType::Heartbeat, "a", "b", 0, vec![]));
        assert_eq!(err, Err(TransportError::PeerDisconnected("b".into())));
    }
}
