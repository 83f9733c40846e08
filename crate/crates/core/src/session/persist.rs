//! `session.data`: binary snapshot of every session, written at clean
//! shutdown.
//!
//! ```text
//! magic    "OTPSESS\x01"
//! u32      session count
//! session* (see `put_session`)
//! u32      trailer length, then trailer bytes (node-level state)
//! ```
//!
//! Integers are big-endian. An empty file means "no sessions".

use std::net::{Ipv4Addr, SocketAddrV4};

use thiserror::Error;

use super::Phase;
use crate::transport::Endpoint;
use crate::vault::Role;

pub const MAGIC: &[u8; 8] = b"OTPSESS\x01";

#[derive(Debug, Error, PartialEq, Eq)]
#[error("session.data is corrupt: {0}")]
pub struct CorruptSessionData(pub &'static str);

/// Unacknowledged datagram kept across a restart.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingSnapshot {
    pub type_code: u8,
    pub transfer: Option<u64>,
    pub datagram: Vec<u8>,
    pub expected_ack: [u8; 16],
    pub retries: u32,
}

/// Everything about a session that survives a restart.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionSnapshot {
    pub pad_id: u32,
    pub phase: Phase,
    pub remote: Option<Endpoint>,
    pub role: Option<Role>,
    pub last_hmac: Option<[u8; 16]>,
    pub last_ack: Option<[u8; 16]>,
    pub pending: Option<PendingSnapshot>,
    pub awaiting_grant: bool,
    pub deferred_request: bool,
    pub pending_rx_switch: Option<u32>,
    pub pending_tx_switch: Option<u32>,
    pub halted: bool,
}

fn phase_code(p: Phase) -> u8 {
    match p {
        Phase::Idle => 0,
        Phase::Probing => 1,
        Phase::Connected => 2,
        Phase::Disconnected => 3,
    }
}

fn phase_from(c: u8) -> Option<Phase> {
    Some(match c {
        0 => Phase::Idle,
        1 => Phase::Probing,
        2 => Phase::Connected,
        3 => Phase::Disconnected,
        _ => return None,
    })
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }
    fn opt16(&mut self, v: &Option<[u8; 16]>) {
        match v {
            Some(b) => {
                self.u8(1);
                self.0.extend_from_slice(b);
            }
            None => self.u8(0),
        }
    }
    fn opt_u32(&mut self, v: Option<u32>) {
        match v {
            Some(x) => {
                self.u8(1);
                self.u32(x);
            }
            None => self.u8(0),
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CorruptSessionData> {
        if self.0.len() < n {
            return Err(CorruptSessionData("truncated"));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, CorruptSessionData> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CorruptSessionData> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32, CorruptSessionData> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CorruptSessionData> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bool(&mut self) -> Result<bool, CorruptSessionData> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(CorruptSessionData("bad flag")),
        }
    }
    fn arr16(&mut self) -> Result<[u8; 16], CorruptSessionData> {
        Ok(self.take(16)?.try_into().expect("16 bytes"))
    }
    fn opt16(&mut self) -> Result<Option<[u8; 16]>, CorruptSessionData> {
        Ok(if self.bool()? { Some(self.arr16()?) } else { None })
    }
    fn opt_u32(&mut self) -> Result<Option<u32>, CorruptSessionData> {
        Ok(if self.bool()? { Some(self.u32()?) } else { None })
    }
    fn bytes(&mut self) -> Result<Vec<u8>, CorruptSessionData> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
}

fn put_session(w: &mut Writer, s: &SessionSnapshot) {
    w.u32(s.pad_id);
    w.u8(phase_code(s.phase));
    match s.remote {
        None => w.u8(0),
        Some(Endpoint::Net(a)) => {
            w.u8(1);
            w.0.extend_from_slice(&a.ip().octets());
            w.u16(a.port());
        }
        Some(Endpoint::Sim(n)) => {
            w.u8(2);
            w.u32(n);
        }
    }
    w.u8(match s.role {
        None => 0,
        Some(Role::A) => 1,
        Some(Role::B) => 2,
    });
    w.opt16(&s.last_hmac);
    w.opt16(&s.last_ack);
    match &s.pending {
        None => w.u8(0),
        Some(p) => {
            w.u8(1);
            w.u8(p.type_code);
            match p.transfer {
                Some(t) => {
                    w.u8(1);
                    w.u64(t);
                }
                None => w.u8(0),
            }
            w.bytes(&p.datagram);
            w.0.extend_from_slice(&p.expected_ack);
            w.u32(p.retries);
        }
    }
    w.bool(s.awaiting_grant);
    w.bool(s.deferred_request);
    w.opt_u32(s.pending_rx_switch);
    w.opt_u32(s.pending_tx_switch);
    w.bool(s.halted);
}

fn get_session(r: &mut Reader<'_>) -> Result<SessionSnapshot, CorruptSessionData> {
    let pad_id = r.u32()?;
    let phase = phase_from(r.u8()?).ok_or(CorruptSessionData("bad phase"))?;
    let remote = match r.u8()? {
        0 => None,
        1 => {
            let ip: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
            Some(Endpoint::Net(SocketAddrV4::new(Ipv4Addr::from(ip), r.u16()?)))
        }
        2 => Some(Endpoint::Sim(r.u32()?)),
        _ => return Err(CorruptSessionData("bad endpoint tag")),
    };
    let role = match r.u8()? {
        0 => None,
        1 => Some(Role::A),
        2 => Some(Role::B),
        _ => return Err(CorruptSessionData("bad role")),
    };
    let last_hmac = r.opt16()?;
    let last_ack = r.opt16()?;
    let pending = if r.bool()? {
        let type_code = r.u8()?;
        let transfer = if r.bool()? { Some(r.u64()?) } else { None };
        let datagram = r.bytes()?;
        if datagram.len() < 17 || datagram.len() > crate::codec::MAX_DATAGRAM {
            return Err(CorruptSessionData("bad pending length"));
        }
        Some(PendingSnapshot {
            type_code,
            transfer,
            datagram,
            expected_ack: r.arr16()?,
            retries: r.u32()?,
        })
    } else {
        None
    };
    Ok(SessionSnapshot {
        pad_id,
        phase,
        remote,
        role,
        last_hmac,
        last_ack,
        pending,
        awaiting_grant: r.bool()?,
        deferred_request: r.bool()?,
        pending_rx_switch: r.opt_u32()?,
        pending_tx_switch: r.opt_u32()?,
        halted: r.bool()?,
    })
}

/// Encode sessions plus an opaque trailer owned by the caller.
pub fn encode_sessions(sessions: &[SessionSnapshot], trailer: &[u8]) -> Vec<u8> {
    let mut w = Writer(MAGIC.to_vec());
    w.u32(sessions.len() as u32);
    for s in sessions {
        put_session(&mut w, s);
    }
    w.bytes(trailer);
    w.0
}

pub fn decode_sessions(bytes: &[u8]) -> Result<(Vec<SessionSnapshot>, Vec<u8>), CorruptSessionData> {
    if bytes.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let mut r = Reader(bytes);
    if r.take(8)? != MAGIC {
        return Err(CorruptSessionData("bad magic"));
    }
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        out.push(get_session(&mut r)?);
    }
    let trailer = r.bytes()?;
    if !r.0.is_empty() {
        return Err(CorruptSessionData("trailing bytes"));
    }
    Ok((out, trailer))
}
