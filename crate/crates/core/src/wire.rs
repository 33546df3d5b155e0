//! Framed telemetry protocol between sensor agents and the collector.
//!
//! Every frame starts with a 6-byte header, all integers little-endian:
//!
//! | offset | size | field                              |
//! |--------|------|------------------------------------|
//! | 0      | 2    | magic `4E 50` ("NP")               |
//! | 2      | 1    | version `01`                       |
//! | 3      | 1    | type: Hello `01`, Sample `02`, Bye `03` |
//! | 4      | 2    | payload length                     |
//!
//! Payloads:
//!
//! * Hello (6 bytes): `node_id: u16`, `sample_period_ms: u32`
//! * Sample (24 bytes): `node_id: u16`, `seq: u64`, `timestamp_us: u64`,
//!   `current_ua: i32`, `bus_mv: u16`
//! * Bye: empty

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 2] = [0x4E, 0x50];
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 6;

pub const TYPE_HELLO: u8 = 0x01;
pub const TYPE_SAMPLE: u8 = 0x02;
pub const TYPE_BYE: u8 = 0x03;

pub const HELLO_PAYLOAD_LEN: usize = 6;
pub const SAMPLE_PAYLOAD_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub node_id: u16,
    pub sample_period_ms: u32,
}

/// One current/voltage reading as sent on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TelemetrySample {
    pub node_id: u16,
    /// Strictly increasing per connection, starting at 0.
    pub seq: u64,
    /// Microseconds since the agent's epoch.
    pub timestamp_us: u64,
    /// May be negative (reverse current).
    pub current_ua: i32,
    pub bus_mv: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Message {
    Hello(Hello),
    Sample(TelemetrySample),
    Bye,
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::Hello(_) => TYPE_HELLO,
            Message::Sample(_) => TYPE_SAMPLE,
            Message::Bye => TYPE_BYE,
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN
            + match self {
                Message::Hello(_) => HELLO_PAYLOAD_LEN,
                Message::Sample(_) => SAMPLE_PAYLOAD_LEN,
                Message::Bye => 0,
            }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("bad magic {0:02X?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message type 0x{0:02X}")]
    UnknownMsgType(u8),
    #[error("message type 0x{msg_type:02X} needs a {expected}-byte payload, header says {actual}")]
    PayloadLengthMismatch {
        msg_type: u8,
        expected: usize,
        actual: usize,
    },
    #[error("hello announces a zero sample period")]
    ZeroSamplePeriod,
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let mut out = Vec::with_capacity(msg.encoded_len());
    encode_into(msg, &mut out);
    out
}

/// Append the frame for `msg` to `out`.
pub fn encode_into(msg: &Message, out: &mut Vec<u8>) {
    let payload_len = (msg.encoded_len() - HEADER_LEN) as u16;
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg.msg_type());
    out.extend_from_slice(&payload_len.to_le_bytes());
    match msg {
        Message::Hello(h) => {
            out.extend_from_slice(&h.node_id.to_le_bytes());
            out.extend_from_slice(&h.sample_period_ms.to_le_bytes());
        }
        Message::Sample(s) => {
            out.extend_from_slice(&s.node_id.to_le_bytes());
            out.extend_from_slice(&s.seq.to_le_bytes());
            out.extend_from_slice(&s.timestamp_us.to_le_bytes());
            out.extend_from_slice(&s.current_ua.to_le_bytes());
            out.extend_from_slice(&s.bus_mv.to_le_bytes());
        }
        Message::Bye => {}
    }
}

fn expected_payload_len(msg_type: u8) -> Option<usize> {
    match msg_type {
        TYPE_HELLO => Some(HELLO_PAYLOAD_LEN),
        TYPE_SAMPLE => Some(SAMPLE_PAYLOAD_LEN),
        TYPE_BYE => Some(0),
        _ => None,
    }
}

/// Try to decode one frame from the front of `buf`.
///
/// Returns `Ok(None)` when `buf` holds only a prefix of a frame. Header
/// fields are validated as soon as their bytes are present, so garbage is
/// rejected without waiting for a full header.
pub fn decode_frame(buf: &[u8]) -> Result<Option<(Message, usize)>, DecodeError> {
    let magic_seen = buf.len().min(2);
    if buf[..magic_seen] != MAGIC[..magic_seen] {
        return Err(DecodeError::BadMagic(buf[..magic_seen].to_vec()));
    }
    if buf.len() < 3 {
        return Ok(None);
    }
    if buf[2] != VERSION {
        return Err(DecodeError::UnsupportedVersion(buf[2]));
    }
    if buf.len() < 4 {
        return Ok(None);
    }
    let msg_type = buf[3];
    let expected = expected_payload_len(msg_type).ok_or(DecodeError::UnknownMsgType(msg_type))?;
    if buf.len() < HEADER_LEN {
        return Ok(None);
    }
    let actual = u16::from_le_bytes([buf[4], buf[5]]) as usize;
    if actual != expected {
        return Err(DecodeError::PayloadLengthMismatch {
            msg_type,
            expected,
            actual,
        });
    }
    let total = HEADER_LEN + expected;
    if buf.len() < total {
        return Ok(None);
    }
    let p = &buf[HEADER_LEN..total];
    let u16_at = |i: usize| u16::from_le_bytes([p[i], p[i + 1]]);
    let u32_at = |i: usize| u32::from_le_bytes(p[i..i + 4].try_into().unwrap());
    let u64_at = |i: usize| u64::from_le_bytes(p[i..i + 8].try_into().unwrap());
    let msg = match msg_type {
        TYPE_HELLO => {
            let sample_period_ms = u32_at(2);
            if sample_period_ms == 0 {
                return Err(DecodeError::ZeroSamplePeriod);
            }
            Message::Hello(Hello {
                node_id: u16_at(0),
                sample_period_ms,
            })
        }
        TYPE_SAMPLE => Message::Sample(TelemetrySample {
            node_id: u16_at(0),
            seq: u64_at(2),
            timestamp_us: u64_at(10),
            current_ua: u32_at(18) as i32,
            bus_mv: u16_at(22),
        }),
        _ => Message::Bye,
    };
    Ok(Some((msg, total)))
}

/// Incremental decoder for one connection. Feed it whatever the socket
/// returned; pull complete messages out.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    start: usize,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        if self.start > 0 && self.start >= self.buf.len() / 2 {
            self.buf.drain(..self.start);
            self.start = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete message, or `None` if more bytes are needed.
    /// Errors are fatal for the connection.
    pub fn next_message(&mut self) -> Result<Option<Message>, DecodeError> {
        match decode_frame(&self.buf[self.start..])? {
            Some((msg, used)) => {
                self.start += used;
                Ok(Some(msg))
            }
            None => Ok(None),
        }
    }

    /// Bytes received but not yet consumed.
    pub fn pending(&self) -> usize {
        self.buf.len() - self.start
    }
}
