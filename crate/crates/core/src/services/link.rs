//! Framed wire protocol with acknowledgment and retransmission.
//!
//! Every frame is `[len: u32 BE][flags: u8][seq: 7-byte BE][payload]`
//! where `len` counts the 8 header bytes plus the UTF-8 canonical message
//! text. Reliable data frames carry a per-link monotone sequence number,
//! are acknowledged individually, retransmitted with exponential backoff
//! (50 ms doubling to a 1 s cap), and delivered to the kernel in sequence
//! order exactly once. Best-effort frames use a separate sequence space
//! and are deduplicated only, so a lost one never stalls reliable traffic.

use crate::message::{self, Message, Reliability};
use std::collections::{BTreeMap, BTreeSet};

/// Frames larger than this are dropped by the link.
pub const MAX_FRAME_LEN: usize = 1 << 20;

pub const FLAG_RELIABLE: u8 = 0b0000_0001;
pub const FLAG_ACK: u8 = 0b0000_0010;

const HEADER_LEN: usize = 8;
const SEQ_MASK: u64 = (1 << 56) - 1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FrameError {
    #[error("frame truncated: have {have} bytes, need {need}")]
    Truncated { have: usize, need: usize },
    #[error("frame length mismatch: prefix says {prefix}, buffer has {actual}")]
    LengthMismatch { prefix: usize, actual: usize },
    #[error("frame payload is not valid UTF-8")]
    BadUtf8,
    #[error("frame payload is not a valid message: {0}")]
    BadPayload(#[from] message::MessageError),
    #[error("frame exceeds the {MAX_FRAME_LEN}-byte limit")]
    Oversize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub flags: u8,
    pub seq: u64,
}

impl FrameHeader {
    pub fn is_ack(&self) -> bool {
        self.flags & FLAG_ACK != 0
    }

    pub fn is_reliable(&self) -> bool {
        self.flags & FLAG_RELIABLE != 0
    }
}

pub fn encode_raw(flags: u8, seq: u64, payload: &[u8]) -> Vec<u8> {
    let len = HEADER_LEN + payload.len();
    let mut out = Vec::with_capacity(4 + len);
    out.extend_from_slice(&(len as u32).to_be_bytes());
    out.push(flags);
    let seq = seq & SEQ_MASK;
    out.extend_from_slice(&seq.to_be_bytes()[1..]);
    out.extend_from_slice(payload);
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<(FrameHeader, &[u8]), FrameError> {
    if bytes.len() < 4 + HEADER_LEN {
        return Err(FrameError::Truncated { have: bytes.len(), need: 4 + HEADER_LEN });
    }
    let prefix = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if prefix != bytes.len() - 4 {
        return Err(FrameError::LengthMismatch { prefix, actual: bytes.len() - 4 });
    }
    if bytes.len() > MAX_FRAME_LEN {
        return Err(FrameError::Oversize);
    }
    let flags = bytes[4];
    let mut seq_bytes = [0u8; 8];
    seq_bytes[1..].copy_from_slice(&bytes[5..12]);
    let seq = u64::from_be_bytes(seq_bytes);
    Ok((FrameHeader { flags, seq }, &bytes[12..]))
}

/// Encodes a standalone data frame for a message (sequence 0). The link
/// protocol assigns real sequence numbers; this form exists for tests and
/// one-shot exchanges.
pub fn encode_frame(m: &Message) -> Vec<u8> {
    let flags = match m.reliability() {
        Reliability::Reliable => FLAG_RELIABLE,
        Reliability::BestEffort => 0,
    };
    encode_raw(flags, 0, message::serialize(m).as_bytes())
}

/// Decodes a data frame back into its message.
pub fn decode_frame(bytes: &[u8]) -> Result<Message, FrameError> {
    let (header, payload) = decode_raw(bytes)?;
    if header.is_ack() {
        return Err(FrameError::LengthMismatch { prefix: 0, actual: payload.len() });
    }
    let text = std::str::from_utf8(payload).map_err(|_| FrameError::BadUtf8)?;
    Ok(message::parse(text)?)
}

/// Retransmission timing. Backoff starts at `initial_us`, doubles on every
/// retransmission, and saturates at `cap_us`.
#[derive(Debug, Clone, Copy)]
pub struct RetryConfig {
    pub initial_us: u64,
    pub cap_us: u64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        RetryConfig { initial_us: 50_000, cap_us: 1_000_000 }
    }
}

#[derive(Debug, Clone)]
struct Inflight {
    bytes: Vec<u8>,
    next_retry_us: u64,
    backoff_us: u64,
}

/// Frames produced by the protocol for the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct OutFrame {
    pub bytes: Vec<u8>,
}

/// Result of feeding a received frame into the endpoint.
#[derive(Debug, Default)]
pub struct LinkInput {
    /// Messages ready for the kernel, in order for reliable traffic.
    pub delivered: Vec<Message>,
    /// Acknowledgment frames to send back.
    pub acks: Vec<OutFrame>,
}

/// One directional pair of a link: sender state toward a peer plus
/// receiver state from that peer.
#[derive(Debug)]
pub struct LinkEndpoint {
    retry: RetryConfig,
    next_reliable_seq: u64,
    next_best_effort_seq: u64,
    inflight: BTreeMap<u64, Inflight>,
    recv_expected: u64,
    recv_ahead: BTreeMap<u64, Message>,
    recv_best_effort_seen: BTreeSet<u64>,
}

impl LinkEndpoint {
    pub fn new(retry: RetryConfig) -> Self {
        LinkEndpoint {
            retry,
            next_reliable_seq: 0,
            next_best_effort_seq: 0,
            inflight: BTreeMap::new(),
            recv_expected: 0,
            recv_ahead: BTreeMap::new(),
            recv_best_effort_seen: BTreeSet::new(),
        }
    }

    /// Frames a message for the wire. Reliable messages are remembered for
    /// retransmission until acknowledged.
    pub fn send(&mut self, m: &Message, now_us: u64) -> Result<OutFrame, FrameError> {
        let payload = message::serialize(m);
        if payload.len() + HEADER_LEN + 4 > MAX_FRAME_LEN {
            return Err(FrameError::Oversize);
        }
        let frame = match m.reliability() {
            Reliability::Reliable => {
                let seq = self.next_reliable_seq;
                self.next_reliable_seq += 1;
                let bytes = encode_raw(FLAG_RELIABLE, seq, payload.as_bytes());
                self.inflight.insert(
                    seq,
                    Inflight {
                        bytes: bytes.clone(),
                        next_retry_us: now_us + self.retry.initial_us,
                        backoff_us: self.retry.initial_us,
                    },
                );
                bytes
            }
            Reliability::BestEffort => {
                let seq = self.next_best_effort_seq;
                self.next_best_effort_seq += 1;
                encode_raw(0, seq, payload.as_bytes())
            }
        };
        Ok(OutFrame { bytes: frame })
    }

    /// Processes an incoming frame: acknowledges reliable data, releases
    /// in-order deliveries, and clears acknowledged retransmission state.
    pub fn on_frame(&mut self, bytes: &[u8], _now_us: u64) -> Result<LinkInput, FrameError> {
        let (header, payload) = decode_raw(bytes)?;
        let mut input = LinkInput::default();
        if header.is_ack() {
            self.inflight.remove(&header.seq);
            return Ok(input);
        }
        if header.is_reliable() {
            // Always acknowledge, even duplicates: the first ack may be lost.
            input.acks.push(OutFrame { bytes: encode_raw(FLAG_ACK, header.seq, &[]) });
            if header.seq < self.recv_expected || self.recv_ahead.contains_key(&header.seq) {
                return Ok(input); // duplicate
            }
            let text = std::str::from_utf8(payload).map_err(|_| FrameError::BadUtf8)?;
            let msg = message::parse(text)?;
            self.recv_ahead.insert(header.seq, msg);
            while let Some(m) = self.recv_ahead.remove(&self.recv_expected) {
                input.delivered.push(m);
                self.recv_expected += 1;
            }
        } else {
            if self.recv_best_effort_seen.contains(&header.seq) {
                return Ok(input); // duplicate
            }
            self.recv_best_effort_seen.insert(header.seq);
            if self.recv_best_effort_seen.len() > 4096 {
                let min = *self.recv_best_effort_seen.iter().next().unwrap();
                self.recv_best_effort_seen.remove(&min);
            }
            let text = std::str::from_utf8(payload).map_err(|_| FrameError::BadUtf8)?;
            input.delivered.push(message::parse(text)?);
        }
        Ok(input)
    }

    /// Returns frames whose retransmission timer has expired and doubles
    /// their backoff.
    pub fn poll_retransmits(&mut self, now_us: u64) -> Vec<OutFrame> {
        let mut out = Vec::new();
        for inflight in self.inflight.values_mut() {
            if inflight.next_retry_us <= now_us {
                out.push(OutFrame { bytes: inflight.bytes.clone() });
                inflight.backoff_us = (inflight.backoff_us * 2).min(self.retry.cap_us);
                inflight.next_retry_us = now_us + inflight.backoff_us;
            }
        }
        out
    }

    /// Earliest pending retransmission deadline, if any frame is in flight.
    pub fn next_timeout_us(&self) -> Option<u64> {
        self.inflight.values().map(|i| i.next_retry_us).min()
    }

    pub fn in_flight(&self) -> usize {
        self.inflight.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::message::Content;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn msg(i: u64, rel: Reliability) -> Message {
        Message::new(
            "Data",
            rel,
            "sink",
            Content::new().with("i", crate::message::Value::text(i.to_string())).unwrap(),
            i,
            None,
        )
        .unwrap()
    }

    #[test]
    fn frame_length_arithmetic() {
        let m = msg(1, Reliability::BestEffort);
        let f = encode_frame(&m);
        let prefix = u32::from_be_bytes([f[0], f[1], f[2], f[3]]) as usize;
        assert_eq!(prefix, f.len() - 4);
        assert_eq!(prefix, HEADER_LEN + message::serialize(&m).len());
    }

    #[test]
    fn decode_inverts_encode() {
        for rel in [Reliability::BestEffort, Reliability::Reliable] {
            let m = msg(7, rel);
            assert_eq!(decode_frame(&encode_frame(&m)).unwrap(), m);
        }
    }

    #[test]
    fn corrupt_frames_are_rejected() {
        let m = msg(1, Reliability::Reliable);
        let mut f = encode_frame(&m);
        assert!(matches!(decode_frame(&f[..8]), Err(FrameError::Truncated { .. })));
        f.truncate(f.len() - 1);
        assert!(matches!(decode_frame(&f), Err(FrameError::LengthMismatch { .. })));
        let mut g = encode_frame(&m);
        let n = g.len();
        g[n - 3] = 0xFF; // invalid UTF-8 inside payload
        assert!(matches!(decode_frame(&g), Err(FrameError::BadUtf8)));
    }

    #[test]
    fn oversize_send_is_refused() {
        let big = "x".repeat(MAX_FRAME_LEN);
        let m = Message::new(
            "Data",
            Reliability::Reliable,
            "sink",
            Content::new().with("blob", crate::message::Value::text(big)).unwrap(),
            0,
            None,
        )
        .unwrap();
        let mut ep = LinkEndpoint::new(RetryConfig::default());
        assert!(matches!(ep.send(&m, 0), Err(FrameError::Oversize)));
    }

    /// Reliable traffic over a 30 %-loss link is delivered exactly once
    /// and in order; best-effort traffic is delivered at most once.
    #[test]
    fn lossy_link_exactly_once() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let mut tx = LinkEndpoint::new(RetryConfig { initial_us: 5_000, cap_us: 50_000 });
        let mut rx = LinkEndpoint::new(RetryConfig::default());

        let total = 60u64;
        let mut now = 0u64;
        let mut wire_to_rx: Vec<Vec<u8>> = Vec::new();
        let mut wire_to_tx: Vec<Vec<u8>> = Vec::new();
        let mut delivered: Vec<u64> = Vec::new();

        for i in 0..total {
            wire_to_rx.push(tx.send(&msg(i, Reliability::Reliable), now).unwrap().bytes);
        }
        // Step the link until quiescent: 30% loss each hop.
        for _ in 0..10_000 {
            now += 1_000;
            for bytes in std::mem::take(&mut wire_to_rx) {
                if rng.random_range(0.0..1.0) < 0.30 {
                    continue;
                }
                let input = rx.on_frame(&bytes, now).unwrap();
                for m in input.delivered {
                    delivered.push(m.content().u64("i").unwrap());
                }
                for ack in input.acks {
                    wire_to_tx.push(ack.bytes);
                }
            }
            for bytes in std::mem::take(&mut wire_to_tx) {
                if rng.random_range(0.0..1.0) < 0.30 {
                    continue;
                }
                tx.on_frame(&bytes, now).unwrap();
            }
            for f in tx.poll_retransmits(now) {
                wire_to_rx.push(f.bytes);
            }
            if tx.in_flight() == 0 && wire_to_rx.is_empty() && wire_to_tx.is_empty() {
                break;
            }
        }
        assert_eq!(tx.in_flight(), 0, "all frames should be acknowledged");
        assert_eq!(delivered, (0..total).collect::<Vec<_>>(), "exactly once, in order");
    }

    #[test]
    fn best_effort_duplicates_are_dropped() {
        let mut tx = LinkEndpoint::new(RetryConfig::default());
        let mut rx = LinkEndpoint::new(RetryConfig::default());
        let f = tx.send(&msg(3, Reliability::BestEffort), 0).unwrap();
        assert_eq!(rx.on_frame(&f.bytes, 0).unwrap().delivered.len(), 1);
        assert_eq!(rx.on_frame(&f.bytes, 0).unwrap().delivered.len(), 0);
    }
}
