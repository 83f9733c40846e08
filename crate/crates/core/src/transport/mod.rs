//! Datagram I/O: addresses, a simulated network, and real UDP sockets.

mod sim;
#[cfg(not(target_arch = "wasm32"))]
mod udp;

use std::fmt;
use std::net::SocketAddrV4;
use std::str::FromStr;

use thiserror::Error;

use crate::codec::MAX_DATAGRAM;

pub use sim::{Delivery, LinkModel, SimNet, TraceEntry, TraceFate, VirtualClock};
#[cfg(not(target_arch = "wasm32"))]
pub use udp::UdpTransport;

/// Where a datagram comes from or goes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Endpoint {
    /// A real IPv4 address and port.
    Net(SocketAddrV4),
    /// A node in the simulator.
    Sim(u32),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Net(a) => write!(f, "{a}"),
            Endpoint::Sim(n) => write!(f, "sim:{n}"),
        }
    }
}

impl FromStr for Endpoint {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(n) = s.strip_prefix("sim:") {
            return n.parse().map(Endpoint::Sim).map_err(|e| format!("bad sim node {n:?}: {e}"));
        }
        s.parse::<SocketAddrV4>()
            .map(Endpoint::Net)
            .map_err(|e| format!("bad endpoint {s:?}: {e}"))
    }
}

impl serde::Serialize for Endpoint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for Endpoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("datagram of {0} bytes exceeds the {MAX_DATAGRAM}-byte limit")]
    OversizeDatagram(usize),
    #[error("endpoint {0} is not reachable over this transport")]
    WrongEndpointKind(Endpoint),
    #[error("socket: {0}")]
    SocketFailure(#[from] std::io::Error),
}

/// Something that can send datagrams.
pub trait DatagramTransport {
    fn send_datagram(&mut self, to: Endpoint, bytes: &[u8]) -> Result<(), TransportError>;
}

pub(crate) fn check_size(bytes: &[u8]) -> Result<(), TransportError> {
    if bytes.len() > MAX_DATAGRAM {
        Err(TransportError::OversizeDatagram(bytes.len()))
    } else {
        Ok(())
    }
}
