//! Per-pad protocol: stop-and-wait delivery, handshake, duplicate handling,
//! offset resynchronisation and page-turn coordination.
//!
//! Nothing here touches a socket or a clock. Callers feed datagrams and the
//! current time in and get [`Output`]s back.

mod chunk;
mod persist;

use std::collections::VecDeque;
use std::time::Duration;

use indexmap::IndexMap;
use thiserror::Error;

use crate::codec::{self, CodecError, PlaintextPacket, HEADER_LEN, MAX_DATAGRAM, MAX_PLAINTEXT};
use crate::hygiene::HygieneEvent;
use crate::transport::Endpoint;
use crate::vault::{Direction, Role, Vault, VaultError};

pub use chunk::{chunk_lengths, REBALANCE_BELOW};
pub use persist::{decode_sessions, encode_sessions, CorruptSessionData, PendingSnapshot, SessionSnapshot};

/// Below this many unused transmit bytes a page turn is arranged first.
pub const LOW_THRESHOLD: usize = 2 * (HEADER_LEN + MAX_PLAINTEXT);
/// How far past the receive cursor a resync search looks.
pub const RESYNC_WINDOW: usize = 1500;
/// Payload bytes per packet after the type byte.
pub const MAX_PAYLOAD: usize = MAX_PLAINTEXT - 1;
/// Key bytes used by the largest page-turn packet.
const MAX_CONTROL_KEY: usize = HEADER_LEN + 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
#[repr(u8)]
pub enum PacketType {
    Chat = 0x01,
    FileBegin = 0x02,
    FileData = 0x03,
    FileEnd = 0x04,
    DirListing = 0x05,
    Gibberish = 0x06,
    TurnRequest = 0x07,
    TurnGrant = 0x08,
    Probe = 0x09,
    Rte = 0x0A,
    Disconnect = 0x0B,
    Quit = 0x0C,
    Abort = 0x0D,
}

impl PacketType {
    pub fn from_code(c: u8) -> Option<PacketType> {
        use PacketType::*;
        Some(match c {
            0x01 => Chat,
            0x02 => FileBegin,
            0x03 => FileData,
            0x04 => FileEnd,
            0x05 => DirListing,
            0x06 => Gibberish,
            0x07 => TurnRequest,
            0x08 => TurnGrant,
            0x09 => Probe,
            0x0A => Rte,
            0x0B => Disconnect,
            0x0C => Quit,
            0x0D => Abort,
            _ => return None,
        })
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    /// Operator traffic, which waits for a connection.
    pub fn is_data(self) -> bool {
        use PacketType::*;
        matches!(self, Chat | FileBegin | FileData | FileEnd | DirListing | Gibberish)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Idle,
    Probing,
    Connected,
    Disconnected,
}

/// Retransmission schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timers {
    pub first_retry: Duration,
    pub later_retry: Duration,
}

impl Default for Timers {
    fn default() -> Self {
        Timers {
            first_retry: Duration::from_millis(300),
            later_retry: Duration::from_secs(2),
        }
    }
}

#[derive(Debug, Error)]
pub enum SendError {
    #[error("session {0:05} is waiting for an acknowledgement")]
    Blocked(u32),
    #[error("session {0:05} is not connected")]
    NotConnected(u32),
    #[error("pad {0:05} has no transmit pages left")]
    PadExhausted(u32),
    #[error("session {0:05} halted after a page-turn error")]
    Halted(u32),
    #[error("no session for pad {0:05}")]
    UnknownSession(u32),
    #[error(transparent)]
    Vault(#[from] VaultError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Something a session wants done or reported.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Output {
    Send { to: Endpoint, bytes: Vec<u8> },
    Event(SessionEvent),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionEvent {
    Delivered { pad: u32, ptype: PacketType, payload: Vec<u8> },
    Acked { pad: u32, ptype: PacketType, transfer: Option<u64>, sent_at: Duration, at: Duration },
    Retransmitted { pad: u32, at: Duration, retries: u32 },
    Connected { pad: u32 },
    Disconnected { pad: u32 },
    RemoteQuit { pad: u32 },
    QuitAcked { pad: u32 },
    RemoteAbort { pad: u32 },
    Duplicate { pad: u32 },
    AddressLearned { pad: u32, addr: Endpoint },
    PageTurned { pad: u32, dir: Direction, page: u32 },
    GrantCollision { pad: u32, page: u32 },
    PadExhausted { pad: u32 },
    PendingForgotten { pad: u32 },
    Dropped { pad: u32, reason: &'static str },
}

/// An operator packet waiting its turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Queued {
    pub ptype: PacketType,
    pub payload: Vec<u8>,
    pub transfer: Option<u64>,
}

impl Queued {
    pub fn new(ptype: PacketType, payload: Vec<u8>) -> Self {
        Queued { ptype, payload, transfer: None }
    }

    pub fn in_transfer(mut self, id: u64) -> Self {
        self.transfer = Some(id);
        self
    }
}

impl Drop for Queued {
    fn drop(&mut self) {
        crate::hygiene::scrub_in_place(&mut self.payload);
    }
}

#[derive(Debug, Clone)]
struct Pending {
    ptype: PacketType,
    transfer: Option<u64>,
    datagram: Vec<u8>,
    expected_ack: [u8; HEADER_LEN],
    sent_at: Duration,
    deadline: Duration,
    retries: u32,
    turn: Option<(Direction, u32)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct SessionStats {
    pub sent: u64,
    pub retransmitted: u64,
    pub received: u64,
    pub duplicates: u64,
    pub acks_sent: u64,
    pub page_turns: u64,
}

/// Protocol state for one pad.
#[derive(Debug)]
pub struct Session {
    pub pad_id: u32,
    phase: Phase,
    remote: Option<Endpoint>,
    role: Option<Role>,
    pending: Option<Pending>,
    control: VecDeque<Queued>,
    outbox: VecDeque<Queued>,
    last_hmac: Option<[u8; HEADER_LEN]>,
    last_ack: Option<[u8; HEADER_LEN]>,
    awaiting_grant: bool,
    deferred_request: bool,
    pending_rx_switch: Option<u32>,
    pending_tx_switch: Option<u32>,
    halted: bool,
    timers: Timers,
    pub stats: SessionStats,
}

impl Session {
    pub fn new(pad_id: u32, remote: Option<Endpoint>, role: Option<Role>, timers: Timers) -> Self {
        Session {
            pad_id,
            phase: Phase::Idle,
            remote,
            role,
            pending: None,
            control: VecDeque::new(),
            outbox: VecDeque::new(),
            last_hmac: None,
            last_ack: None,
            awaiting_grant: false,
            deferred_request: false,
            pending_rx_switch: None,
            pending_tx_switch: None,
            halted: false,
            timers,
            stats: SessionStats::default(),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn remote(&self) -> Option<Endpoint> {
        self.remote
    }

    pub fn set_remote(&mut self, remote: Option<Endpoint>) {
        self.remote = remote;
    }

    pub fn role(&self) -> Option<Role> {
        self.role
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    /// Waiting for an acknowledgement of our own packet.
    pub fn is_blocked(&self) -> bool {
        self.pending.is_some()
    }

    /// Anything sent or queued that has not been acknowledged.
    pub fn is_busy(&self) -> bool {
        self.pending.is_some() || !self.outbox.is_empty() || !self.control.is_empty() || self.awaiting_grant
    }

    pub fn pending_datagram(&self) -> Option<&[u8]> {
        self.pending.as_ref().map(|p| p.datagram.as_slice())
    }

    pub fn expected_ack(&self) -> Option<[u8; HEADER_LEN]> {
        self.pending.as_ref().map(|p| p.expected_ack)
    }

    pub fn pending_type(&self) -> Option<PacketType> {
        self.pending.as_ref().map(|p| p.ptype)
    }

    pub fn queued_len(&self) -> usize {
        self.outbox.len()
    }

    pub fn awaiting_grant(&self) -> bool {
        self.awaiting_grant
    }

    pub fn last_hmac(&self) -> Option<[u8; HEADER_LEN]> {
        self.last_hmac
    }

    pub fn next_deadline(&self) -> Option<Duration> {
        self.pending.as_ref().map(|p| p.deadline)
    }

    /// Whether this end grants page turns right now, counting switches that
    /// are announced but not yet acknowledged.
    pub fn is_coordinator(&self, vault: &Vault) -> bool {
        let Some(m) = vault.metadata(self.pad_id) else { return false };
        let tx = self.pending_tx_switch.unwrap_or(m.tx_pg);
        let rx = self.pending_rx_switch.unwrap_or(m.rx_pg);
        tx > rx || (tx == rx && self.role == Some(Role::A))
    }

    fn next_page(&self, vault: &Vault) -> Result<u32, VaultError> {
        let hi = vault.highest_page(self.pad_id)?;
        Ok([Some(hi), self.pending_rx_switch, self.pending_tx_switch].into_iter().flatten().max().unwrap_or(hi) + 1)
    }

    /// Start the probe / round-trip-established handshake.
    pub fn connect(&mut self, vault: &mut Vault, now: Duration, out: &mut Vec<Output>) {
        self.phase = Phase::Probing;
        self.control.retain(|q| q.ptype != PacketType::Probe && q.ptype != PacketType::Rte);
        self.control.push_back(Queued::new(PacketType::Probe, Vec::new()));
        self.pump(vault, now, out);
    }

    pub fn disconnect(&mut self, vault: &mut Vault, now: Duration, out: &mut Vec<Output>) {
        self.outbox.clear();
        self.control.push_back(Queued::new(PacketType::Disconnect, Vec::new()));
        self.pump(vault, now, out);
    }

    pub fn quit(&mut self, vault: &mut Vault, now: Duration, out: &mut Vec<Output>) {
        self.outbox.clear();
        self.control.push_back(Queued::new(PacketType::Quit, Vec::new()));
        self.pump(vault, now, out);
    }

    /// Queue operator packets. Refused while anything is outstanding.
    pub fn enqueue(
        &mut self,
        vault: &mut Vault,
        items: Vec<Queued>,
        now: Duration,
        out: &mut Vec<Output>,
    ) -> Result<(), SendError> {
        if self.halted {
            return Err(SendError::Halted(self.pad_id));
        }
        if self.phase != Phase::Connected {
            return Err(SendError::NotConnected(self.pad_id));
        }
        if self.is_busy() {
            return Err(SendError::Blocked(self.pad_id));
        }
        if vault.is_exhausted(self.pad_id, Direction::Tx) {
            return Err(SendError::PadExhausted(self.pad_id));
        }
        for q in &items {
            PlaintextPacket::new(q.ptype.code(), &q.payload)?;
        }
        self.outbox.extend(items);
        self.pump(vault, now, out);
        Ok(())
    }

    /// Send `payload` as packets of type `ptype`, split to fit.
    pub fn send(
        &mut self,
        vault: &mut Vault,
        ptype: PacketType,
        payload: &[u8],
        now: Duration,
        out: &mut Vec<Output>,
    ) -> Result<(), SendError> {
        let mut items = Vec::new();
        let mut at = 0;
        for len in chunk_lengths(payload.len(), MAX_PAYLOAD) {
            items.push(Queued::new(ptype, payload[at..at + len].to_vec()));
            at += len;
        }
        if items.is_empty() {
            items.push(Queued::new(ptype, Vec::new()));
        }
        self.enqueue(vault, items, now, out)
    }

    /// Drop queued transfer packets and tell the peer. Returns whether there
    /// was anything to abort.
    pub fn abort_transfer(&mut self, vault: &mut Vault, now: Duration, out: &mut Vec<Output>) -> bool {
        let before = self.outbox.len();
        self.outbox.retain(|q| q.transfer.is_none());
        let in_flight = self.pending.as_ref().is_some_and(|p| p.transfer.is_some());
        let aborted = before != self.outbox.len() || in_flight;
        if aborted {
            self.control.push_back(Queued::new(PacketType::Abort, Vec::new()));
            self.pump(vault, now, out);
        }
        aborted
    }

    /// Tell the peer to stop sending its current transfer.
    pub fn reject_transfer(&mut self, vault: &mut Vault, now: Duration, out: &mut Vec<Output>) {
        if !self.control.iter().any(|q| q.ptype == PacketType::Abort) {
            self.control.push_back(Queued::new(PacketType::Abort, Vec::new()));
        }
        self.pump(vault, now, out);
    }

    /// Give up on the outstanding acknowledgement.
    pub fn forget_pending(&mut self, vault: &mut Vault, now: Duration, out: &mut Vec<Output>) -> bool {
        let had = self.pending.take();
        if let Some(p) = &had {
            if p.ptype == PacketType::TurnRequest {
                self.awaiting_grant = false;
            }
            if let Some((dir, _)) = p.turn {
                match dir {
                    Direction::Rx => self.pending_rx_switch = None,
                    Direction::Tx => self.pending_tx_switch = None,
                }
            }
            out.push(Output::Event(SessionEvent::PendingForgotten { pad: self.pad_id }));
            self.pump(vault, now, out);
        }
        had.is_some()
    }

    /// Send whatever should go next, if the session is free to send.
    pub fn pump(&mut self, vault: &mut Vault, now: Duration, out: &mut Vec<Output>) {
        loop {
            if self.halted || self.pending.is_some() || self.remote.is_none() {
                return;
            }
            match self.pump_once(vault, now, out) {
                Ok(true) => continue,
                Ok(false) => return,
                Err(e) => {
                    log::warn!("pad {:05}: {e}", self.pad_id);
                    self.outbox.clear();
                    self.control.clear();
                    out.push(Output::Event(SessionEvent::Dropped { pad: self.pad_id, reason: "send failed" }));
                    return;
                }
            }
        }
    }

    /// Returns `Ok(true)` to go round again without having sent anything.
    fn pump_once(&mut self, vault: &mut Vault, now: Duration, out: &mut Vec<Output>) -> Result<bool, SendError> {
        let pad = self.pad_id;
        if self.deferred_request && self.is_coordinator(vault) && !vault.is_exhausted(pad, Direction::Tx) {
            let page = self.next_page(vault)?;
            self.deferred_request = false;
            self.pending_rx_switch = Some(page);
            let mut payload = vec![0u8];
            payload.extend_from_slice(&page.to_be_bytes());
            self.transmit(vault, PacketType::TurnGrant, &payload, None, Some((Direction::Rx, page)), now, out)?;
            return Ok(false);
        }
        if self.awaiting_grant {
            return Ok(false);
        }
        let connected = self.phase == Phase::Connected;
        let from_control = !self.control.is_empty();
        let next = match self.control.front() {
            Some(q) => q,
            None if connected => match self.outbox.front() {
                Some(q) => q,
                None => return Ok(false),
            },
            None => return Ok(false),
        };
        if vault.is_exhausted(pad, Direction::Tx) {
            self.outbox.clear();
            self.control.clear();
            out.push(Output::Event(SessionEvent::PadExhausted { pad }));
            return Ok(false);
        }
        let need = HEADER_LEN + 1 + next.payload.len();
        let remaining = vault.remaining(pad, Direction::Tx);
        let fresh = vault.metadata(pad).is_some_and(|m| m.tx_off == 0);
        let low = (remaining < LOW_THRESHOLD && !fresh) || remaining < need + MAX_CONTROL_KEY;
        if low {
            if fresh {
                // Even an unused page cannot hold this packet.
                if from_control {
                    self.control.pop_front();
                } else {
                    self.outbox.pop_front();
                }
                out.push(Output::Event(SessionEvent::Dropped { pad, reason: "packet larger than a page" }));
                return Ok(true);
            }
            let page = self.next_page(vault)?;
            let pages = vault.metadata(pad).map(|m| m.pages).unwrap_or(0);
            if page >= pages {
                vault.turn_page(pad, Direction::Tx, page)?;
                return Ok(true);
            }
            if self.is_coordinator(vault) {
                self.pending_tx_switch = Some(page);
                let mut payload = vec![1u8];
                payload.extend_from_slice(&page.to_be_bytes());
                self.transmit(vault, PacketType::TurnGrant, &payload, None, Some((Direction::Tx, page)), now, out)?;
            } else {
                let tx_pg = vault.metadata(pad).map(|m| m.tx_pg).unwrap_or(0);
                self.awaiting_grant = true;
                self.transmit(vault, PacketType::TurnRequest, &tx_pg.to_be_bytes(), None, None, now, out)?;
            }
            return Ok(false);
        }
        let q = if from_control { self.control.pop_front() } else { self.outbox.pop_front() }.expect("peeked above");
        self.transmit(vault, q.ptype, &q.payload, q.transfer, None, now, out)?;
        Ok(false)
    }

    #[allow(clippy::too_many_arguments)]
    fn transmit(
        &mut self,
        vault: &mut Vault,
        ptype: PacketType,
        payload: &[u8],
        transfer: Option<u64>,
        turn: Option<(Direction, u32)>,
        now: Duration,
        out: &mut Vec<Output>,
    ) -> Result<(), SendError> {
        let to = self.remote.expect("pump checks for a remote");
        let plain = PlaintextPacket::new(ptype.code(), payload)?;
        let mut a = vault.consume(self.pad_id, Direction::Tx, HEADER_LEN)?;
        let mut k = vault.consume(self.pad_id, Direction::Tx, plain.len())?;
        let (c, expected_ack) = codec::encrypt_packet(&plain, &mut a, &mut k, vault.scrubber())?;
        let datagram = c.into_bytes();
        vault.scrubber().record(HygieneEvent::DatagramEmitted { len: datagram.len() });
        out.push(Output::Send { to, bytes: datagram.clone() });
        self.stats.sent += 1;
        self.pending = Some(Pending {
            ptype,
            transfer,
            datagram,
            expected_ack,
            sent_at: now,
            deadline: now + self.timers.first_retry,
            retries: 0,
            turn,
        });
        Ok(())
    }

    /// Retransmit the outstanding packet if its deadline has passed.
    pub fn on_timer(&mut self, now: Duration, out: &mut Vec<Output>) {
        let Some(to) = self.remote else { return };
        let Some(p) = self.pending.as_mut() else { return };
        if now < p.deadline {
            return;
        }
        out.push(Output::Send { to, bytes: p.datagram.clone() });
        p.retries += 1;
        while p.deadline <= now {
            p.deadline += self.timers.later_retry;
        }
        self.stats.retransmitted += 1;
        out.push(Output::Event(SessionEvent::Retransmitted { pad: self.pad_id, at: now, retries: p.retries }));
    }

    fn on_ack(&mut self, vault: &mut Vault, now: Duration, out: &mut Vec<Output>) {
        let Some(p) = self.pending.take() else { return };
        let pad = self.pad_id;
        if let Some((dir, page)) = p.turn {
            match dir {
                Direction::Rx => self.pending_rx_switch = None,
                Direction::Tx => self.pending_tx_switch = None,
            }
            self.apply_turn(vault, dir, page, out);
        }
        match p.ptype {
            PacketType::Probe => self.control.push_front(Queued::new(PacketType::Rte, Vec::new())),
            PacketType::Rte => {
                self.phase = Phase::Connected;
                out.push(Output::Event(SessionEvent::Connected { pad }));
            }
            PacketType::Disconnect => {
                self.phase = Phase::Disconnected;
                out.push(Output::Event(SessionEvent::Disconnected { pad }));
            }
            PacketType::Quit => out.push(Output::Event(SessionEvent::QuitAcked { pad })),
            PacketType::TurnRequest | PacketType::TurnGrant | PacketType::Abort => {}
            t => out.push(Output::Event(SessionEvent::Acked {
                pad,
                ptype: t,
                transfer: p.transfer,
                sent_at: p.sent_at,
                at: now,
            })),
        }
        self.pump(vault, now, out);
    }

    fn apply_turn(&mut self, vault: &mut Vault, dir: Direction, page: u32, out: &mut Vec<Output>) -> bool {
        match vault.turn_page(self.pad_id, dir, page) {
            Ok(()) => {
                self.stats.page_turns += 1;
                let now_on = vault
                    .metadata(self.pad_id)
                    .map(|m| if dir == Direction::Tx { m.tx_pg } else { m.rx_pg })
                    .unwrap_or(page);
                out.push(Output::Event(SessionEvent::PageTurned { pad: self.pad_id, dir, page: now_on }));
                true
            }
            Err(e) => {
                log::error!("pad {:05}: page turn to {page} refused: {e}", self.pad_id);
                self.halted = true;
                self.outbox.clear();
                self.control.clear();
                self.pending = None;
                out.push(Output::Event(SessionEvent::GrantCollision { pad: self.pad_id, page }));
                false
            }
        }
    }

    fn on_plaintext(&mut self, vault: &mut Vault, plain: &PlaintextPacket, now: Duration, out: &mut Vec<Output>) {
        let pad = self.pad_id;
        self.stats.received += 1;
        let Some(ptype) = PacketType::from_code(plain.type_code()) else {
            out.push(Output::Event(SessionEvent::Dropped { pad, reason: "unknown packet type" }));
            return;
        };
        match ptype {
            t if t.is_data() => {
                out.push(Output::Event(SessionEvent::Delivered { pad, ptype: t, payload: plain.payload().to_vec() }))
            }
            PacketType::Probe => {}
            PacketType::Rte => {
                if self.phase != Phase::Connected {
                    self.phase = Phase::Connected;
                    out.push(Output::Event(SessionEvent::Connected { pad }));
                }
            }
            PacketType::Disconnect => {
                self.phase = Phase::Disconnected;
                self.outbox.clear();
                out.push(Output::Event(SessionEvent::Disconnected { pad }));
            }
            PacketType::Quit => out.push(Output::Event(SessionEvent::RemoteQuit { pad })),
            PacketType::Abort => {
                self.outbox.retain(|q| q.transfer.is_none());
                out.push(Output::Event(SessionEvent::RemoteAbort { pad }));
            }
            PacketType::TurnRequest => self.deferred_request = true,
            PacketType::TurnGrant => {
                let p = plain.payload();
                if p.len() != 5 || p[0] > 1 {
                    self.halted = true;
                    out.push(Output::Event(SessionEvent::GrantCollision { pad, page: 0 }));
                    return;
                }
                let page = u32::from_be_bytes(p[1..5].try_into().expect("4 bytes"));
                if p[0] == 0 {
                    if self.apply_turn(vault, Direction::Tx, page, out) {
                        self.awaiting_grant = false;
                        if self.pending.as_ref().is_some_and(|x| x.ptype == PacketType::TurnRequest) {
                            self.pending = None;
                        }
                    }
                } else {
                    self.apply_turn(vault, Direction::Rx, page, out);
                }
            }
            _ => unreachable!("all data types handled above"),
        }
        self.pump(vault, now, out);
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            pad_id: self.pad_id,
            phase: self.phase,
            remote: self.remote,
            role: self.role,
            last_hmac: self.last_hmac,
            last_ack: self.last_ack,
            pending: self.pending.as_ref().map(|p| PendingSnapshot {
                type_code: p.ptype.code(),
                transfer: p.transfer,
                datagram: p.datagram.clone(),
                expected_ack: p.expected_ack,
                retries: p.retries,
            }),
            awaiting_grant: self.awaiting_grant,
            deferred_request: self.deferred_request,
            pending_rx_switch: self.pending_rx_switch,
            pending_tx_switch: self.pending_tx_switch,
            halted: self.halted,
        }
    }

    pub fn from_snapshot(s: SessionSnapshot, timers: Timers) -> Result<Session, CorruptSessionData> {
        let mut out = Session::new(s.pad_id, s.remote, s.role, timers);
        out.phase = s.phase;
        out.last_hmac = s.last_hmac;
        out.last_ack = s.last_ack;
        out.awaiting_grant = s.awaiting_grant;
        out.deferred_request = s.deferred_request;
        out.pending_rx_switch = s.pending_rx_switch;
        out.pending_tx_switch = s.pending_tx_switch;
        out.halted = s.halted;
        if let Some(p) = s.pending {
            let ptype = PacketType::from_code(p.type_code).ok_or(CorruptSessionData("bad packet type"))?;
            let turn = match ptype {
                PacketType::TurnGrant => match (s.pending_rx_switch, s.pending_tx_switch) {
                    (Some(pg), _) => Some((Direction::Rx, pg)),
                    (None, Some(pg)) => Some((Direction::Tx, pg)),
                    _ => None,
                },
                _ => None,
            };
            out.pending = Some(Pending {
                ptype,
                transfer: p.transfer,
                datagram: p.datagram,
                expected_ack: p.expected_ack,
                sent_at: Duration::ZERO,
                deadline: Duration::ZERO,
                retries: p.retries,
                turn,
            });
        }
        Ok(out)
    }

    /// After a restart: re-emit any outstanding packet straight away.
    pub fn resume(&mut self, now: Duration, out: &mut Vec<Output>) {
        let first = self.timers.first_retry;
        if let (Some(to), Some(p)) = (self.remote, self.pending.as_mut()) {
            out.push(Output::Send { to, bytes: p.datagram.clone() });
            p.sent_at = now;
            p.deadline = now + first;
        }
    }
}

/// What became of one incoming datagram.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Disposition {
    /// Too short or too long to consider.
    Discarded,
    AckCleared { pad: u32 },
    Accepted { pad: u32, offset: usize, resync: bool },
    Duplicate { pad: u32 },
    /// Nothing matched; no reply.
    Silent,
}

/// All sessions of one node, and the receive path that spans them.
#[derive(Debug, Default)]
pub struct SessionSet {
    sessions: IndexMap<u32, Session>,
    /// Header MAC computations performed on received datagrams.
    pub hmac_evals: u64,
}

impl SessionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, s: Session) {
        self.sessions.insert(s.pad_id, s);
        self.sessions.sort_keys();
    }

    pub fn remove(&mut self, pad: u32) -> Option<Session> {
        self.sessions.shift_remove(&pad)
    }

    pub fn get(&self, pad: u32) -> Option<&Session> {
        self.sessions.get(&pad)
    }

    pub fn get_mut(&mut self, pad: u32) -> Option<&mut Session> {
        self.sessions.get_mut(&pad)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Session> {
        self.sessions.values_mut()
    }

    pub fn pads(&self) -> Vec<u32> {
        self.sessions.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    /// Earliest retransmission deadline across sessions.
    pub fn next_deadline(&self) -> Option<Duration> {
        self.sessions.values().filter_map(Session::next_deadline).min()
    }

    /// Fire due timers, in pad order.
    pub fn on_timer(&mut self, now: Duration, out: &mut Vec<Output>) {
        for s in self.sessions.values_mut() {
            s.on_timer(now, out);
        }
    }

    pub fn pump_all(&mut self, vault: &mut Vault, now: Duration, out: &mut Vec<Output>) {
        for s in self.sessions.values_mut() {
            s.pump(vault, now, out);
        }
    }

    pub fn snapshot(&self) -> Vec<SessionSnapshot> {
        self.sessions.values().map(Session::snapshot).collect()
    }

    /// Handle one datagram from `src`.
    pub fn on_datagram(
        &mut self,
        vault: &mut Vault,
        bytes: &[u8],
        src: Endpoint,
        now: Duration,
        out: &mut Vec<Output>,
    ) -> Disposition {
        if bytes.len() < HEADER_LEN || bytes.len() > MAX_DATAGRAM {
            return Disposition::Discarded;
        }
        if bytes.len() == HEADER_LEN {
            let hit = self
                .sessions
                .values()
                .find(|s| s.expected_ack().is_some_and(|a| a[..] == *bytes))
                .map(|s| s.pad_id);
            if let Some(pad) = hit {
                self.sessions[&pad].on_ack(vault, now, out);
                return Disposition::AckCleared { pad };
            }
        }
        let pads: Vec<u32> = self.sessions.values().filter(|s| !s.halted).map(|s| s.pad_id).collect();
        for &pad in &pads {
            if let Attempt::Match(plain) = self.attempt(vault, pad, bytes, None) {
                let off = vault.metadata(pad).map(|m| m.rx_off as usize).unwrap_or(0);
                return self.accept(vault, pad, off, bytes, plain, src, now, out, false);
            }
        }
        let header: [u8; HEADER_LEN] = bytes[..HEADER_LEN].try_into().expect("length checked");
        let dup = self.sessions.values().find(|s| s.last_hmac == Some(header)).map(|s| s.pad_id);
        if let Some(pad) = dup {
            let s = &mut self.sessions[&pad];
            s.stats.duplicates += 1;
            if let Some(ack) = s.last_ack {
                out.push(Output::Send { to: src, bytes: ack.to_vec() });
                s.stats.acks_sent += 1;
            }
            out.push(Output::Event(SessionEvent::Duplicate { pad }));
            return Disposition::Duplicate { pad };
        }
        for &pad in &pads {
            for d in 1..=RESYNC_WINDOW {
                match self.attempt(vault, pad, bytes, Some(d)) {
                    Attempt::Match(plain) => {
                        let off = vault.metadata(pad).map(|m| m.rx_off as usize).unwrap_or(0) + d;
                        return self.accept(vault, pad, off, bytes, plain, src, now, out, true);
                    }
                    Attempt::OffPage => break,
                    Attempt::Mismatch => {}
                }
            }
        }
        Disposition::Silent
    }
}

enum Attempt {
    Match(PlaintextPacket),
    Mismatch,
    /// The candidate key would run past the page (or the pad is used up).
    OffPage,
}

impl SessionSet {
    /// Try the receive cursor of `pad`, moved `ahead` bytes if given.
    fn attempt(&mut self, vault: &mut Vault, pad: u32, bytes: &[u8], ahead: Option<usize>) -> Attempt {
        if vault.is_exhausted(pad, Direction::Rx) {
            return Attempt::OffPage;
        }
        let Some(m) = vault.metadata(pad) else { return Attempt::OffPage };
        let off = m.rx_off as usize + ahead.unwrap_or(0);
        let Ok(Some(cand)) = vault.peek(pad, Direction::Rx, off, bytes.len()) else {
            return Attempt::OffPage;
        };
        self.hmac_evals += 1;
        let a: [u8; HEADER_LEN] = cand[..HEADER_LEN].try_into().expect("peeked full length");
        match codec::try_decrypt(bytes, &a, &cand[HEADER_LEN..]) {
            Ok(Some(p)) => Attempt::Match(p),
            _ => Attempt::Mismatch,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn accept(
        &mut self,
        vault: &mut Vault,
        pad: u32,
        offset: usize,
        bytes: &[u8],
        plain: PlaintextPacket,
        src: Endpoint,
        now: Duration,
        out: &mut Vec<Output>,
        resync: bool,
    ) -> Disposition {
        let mut slice = match vault.consume_at(pad, Direction::Rx, offset, bytes.len()) {
            Ok(s) => s,
            Err(e) => {
                log::error!("pad {pad:05}: could not consume receive key: {e}");
                return Disposition::Silent;
            }
        };
        let ack: [u8; HEADER_LEN] = slice.bytes().expect("fresh slice")[..HEADER_LEN].try_into().expect("16 bytes");
        slice.destroy(vault.scrubber());
        out.push(Output::Send { to: src, bytes: ack.to_vec() });
        let s = &mut self.sessions[&pad];
        s.stats.acks_sent += 1;
        s.last_hmac = Some(bytes[..HEADER_LEN].try_into().expect("16 bytes"));
        s.last_ack = Some(ack);
        if s.remote != Some(src) {
            s.remote = Some(src);
            out.push(Output::Event(SessionEvent::AddressLearned { pad, addr: src }));
        }
        s.on_plaintext(vault, &plain, now, out);
        Disposition::Accepted { pad, offset, resync }
    }
}
