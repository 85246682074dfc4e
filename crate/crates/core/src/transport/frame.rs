//! Wire layout, all integers little-endian:
//!
//! ```text
//! "FFEV" | len u32 | type u8 | sender_len u16 | sender | recipient_len u16 |
//! recipient | round u32 | payload_len u32 | payload | payload_crc u32 | crc u32
//! ```
//!
//! `len` counts every byte after itself. The trailing CRC32 covers every
//! byte before it.

use std::io::{ErrorKind, Read};

use super::{Envelope, MsgType, Result, TransportError};

const MAGIC: &[u8; 4] = b"FFEV";

/// Frame size with empty ids and an empty payload.
pub const FRAME_OVERHEAD: usize = 4 + 4 + 1 + 2 + 2 + 4 + 4 + 4 + 4;

/// Frames above this size are rejected before allocation.
pub const MAX_FRAME_LEN: usize = 1 << 30;

pub fn frame_len(sender: &str, recipient: &str, payload_len: usize) -> usize {
    FRAME_OVERHEAD + sender.len() + recipient.len() + payload_len
}

pub fn frame(env: &Envelope) -> Vec<u8> {
    let total = env.wire_len();
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&((total - 8) as u32).to_le_bytes());
    out.push(env.msg_type.code());
    for id in [&env.sender, &env.recipient] {
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    out.extend_from_slice(&env.round.to_le_bytes());
    out.extend_from_slice(&(env.payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&env.payload);
    out.extend_from_slice(&env.payload_crc.to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn malformed(offset: usize, reason: impl Into<String>) -> TransportError {
    TransportError::MalformedFrame { offset, reason: reason.into() }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(malformed(self.pos, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn id(&mut self, what: &str) -> Result<String> {
        let n = self.u16(what)? as usize;
        let at = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| malformed(at, format!("{what} is not UTF-8")))
    }
}

/// Parses one frame from the front of `bytes`; returns the envelope and the
/// number of bytes consumed. The payload checksum is carried through
/// unchecked; see [`Envelope::crc_ok`].
pub fn unframe(bytes: &[u8]) -> Result<(Envelope, usize)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(malformed(0, "bad magic"));
    }
    let len = c.u32("length")? as usize;
    if len > MAX_FRAME_LEN {
        return Err(malformed(4, format!("frame length {len} exceeds limit")));
    }
    let total = 8 + len;
    if bytes.len() < total {
        return Err(malformed(bytes.len(), format!("truncated frame: have {} of {total} bytes", bytes.len())));
    }
    let mut c = Cursor { bytes: &bytes[..total], pos: 8 };
    let code = c.take(1, "type")?[0];
    let msg_type = MsgType::from_code(code).ok_or_else(|| malformed(8, format!("unknown message type {code}")))?;
    let sender = c.id("sender")?;
    let recipient = c.id("recipient")?;
    let round = c.u32("round")?;
    let payload_len = c.u32("payload length")? as usize;
    let payload = c.take(payload_len, "payload")?.to_vec();
    let payload_crc = c.u32("payload crc")?;
    let body_end = c.pos;
    let trailer = c.u32("trailer")?;
    if c.pos != total {
        return Err(malformed(c.pos, "length field disagrees with contents"));
    }
    if crc32fast::hash(&bytes[..body_end]) != trailer {
        return Err(malformed(body_end, "frame checksum mismatch"));
    }
    Ok((Envelope { msg_type, sender, recipient, round, payload, payload_crc }, total))
}

/// Incremental frame parser over a byte stream.
pub struct FrameReader<R> {
    inner: R,
    consumed: usize,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, consumed: 0 }
    }

    /// `Ok(None)` on a clean end of stream between frames.
    pub fn next_frame(&mut self) -> Result<Option<Envelope>> {
        let mut head = [0u8; 8];
        let got = read_full(&mut self.inner, &mut head)?;
        if got == 0 {
            return Ok(None);
        }
        if got < head.len() {
            return Err(malformed(self.consumed + got, "stream ended inside frame header"));
        }
        if &head[..4] != MAGIC {
            return Err(malformed(self.consumed, "bad magic"));
        }
        let len = u32::from_le_bytes(head[4..].try_into().expect("4 bytes")) as usize;
        if len > MAX_FRAME_LEN {
            return Err(malformed(self.consumed + 4, format!("frame length {len} exceeds limit")));
        }
        let mut buf = Vec::with_capacity(8 + len);
        buf.extend_from_slice(&head);
        buf.resize(8 + len, 0);
        let got = read_full(&mut self.inner, &mut buf[8..])?;
        if got < len {
            return Err(malformed(self.consumed + 8 + got, "stream ended inside frame"));
        }
        let (env, used) = unframe(&buf).map_err(|e| match e {
            TransportError::MalformedFrame { offset, reason } => malformed(self.consumed + offset, reason),
            other => other,
        })?;
        self.consumed += used;
        Ok(Some(env))
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(TransportError::Io(e.to_string())),
        }
    }
    Ok(filled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_payload_frame_is_header_sized() {
        let env = Envelope::new(MsgType::Heartbeat, "", "", 0, vec![]);
        assert_eq!(frame(&env).len(), FRAME_OVERHEAD);
        let env = Envelope::new(MsgType::Heartbeat, "server", "a", 3, vec![]);
        assert_eq!(frame(&env).len(), FRAME_OVERHEAD + 7);
    }

    #[test]
    fn layout_is_bit_exact() {
        let env = Envelope::new(MsgType::TaskAssign, "s", "c", 2, vec![0xAB]);
        let f = frame(&env);
        let mut expected = b"FFEV".to_vec();
        expected.extend_from_slice(&((FRAME_OVERHEAD + 3 - 8) as u32).to_le_bytes());
        expected.push(1);
        expected.extend_from_slice(&[1, 0, b's', 1, 0, b'c']);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(0xAB);
        expected.extend_from_slice(&crc32fast::hash(&[0xAB]).to_le_bytes());
        let crc = crc32fast::hash(&expected);
        expected.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(f, expected);
    }

    #[test]
    fn every_truncation_is_malformed() {
        let env = Envelope::new(MsgType::ModelPayload, "server", "client-7", 9, (0..40).collect());
        let f = frame(&env);
        for cut in 0..f.len() {
            assert!(matches!(unframe(&f[..cut]), Err(TransportError::MalformedFrame { .. })), "cut {cut}");
            let mut reader = FrameReader::new(&f[..cut]);
            match reader.next_frame() {
                Ok(None) => assert_eq!(cut, 0),
                Err(TransportError::MalformedFrame { .. }) => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn corrupted_byte_is_detected() {
        let env = Envelope::new(MsgType::ResultSubmit, "a", "server", 1, vec![1, 2, 3, 4]);
        let mut f = frame(&env);
        f[20] ^= 0x10;
        assert!(unframe(&f).is_err());
    }

    #[test]
    fn reader_yields_consecutive_frames() {
        let a = Envelope::new(MsgType::Register, "a", "server", 0, b"hello".to_vec());
        let b = Envelope::new(MsgType::Abort, "server", "a", 4, vec![]);
        let mut stream = frame(&a);
        stream.extend(frame(&b));
        let mut reader = FrameReader::new(stream.as_slice());
        assert_eq!(reader.next_frame().unwrap(), Some(a));
        assert_eq!(reader.next_frame().unwrap(), Some(b));
        assert_eq!(reader.next_frame().unwrap(), None);
    }

    fn arb_envelope() -> impl Strategy<Value = Envelope> {
        (0u8..8, "[a-z0-9-]{0,12}", "[a-z0-9-]{0,12}", any::<u32>(), proptest::collection::vec(any::<u8>(), 0..256))
            .prop_map(|(t, s, r, round, payload)| Envelope::new(MsgType::from_code(t).unwrap(), s, r, round, payload))
    }

    proptest! {
        #[test]
        fn round_trip(env in arb_envelope()) {
            let f = frame(&env);
            prop_assert_eq!(f.len(), env.wire_len());
            let (back, used) = unframe(&f).unwrap();
            prop_assert_eq!(used, f.len());
            prop_assert!(back.crc_ok());
            prop_assert_eq!(back, env);
        }
    }
}
