//! Non-blocking UDP/IPv4 socket registered with a `mio` poll.

use std::io;
use std::net::{SocketAddr, SocketAddrV4};

use mio::net::UdpSocket;
use mio::{Interest, Registry, Token};

use super::{check_size, DatagramTransport, Endpoint, TransportError};
use crate::codec::MAX_DATAGRAM;

#[derive(Debug)]
pub struct UdpTransport {
    socket: UdpSocket,
}

impl UdpTransport {
    pub fn bind(addr: SocketAddrV4) -> Result<Self, TransportError> {
        Ok(UdpTransport {
            socket: UdpSocket::bind(SocketAddr::V4(addr))?,
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.socket.local_addr()
    }

    pub fn register(&mut self, registry: &Registry, token: Token) -> io::Result<()> {
        registry.register(&mut self.socket, token, Interest::READABLE)
    }

    /// Read one datagram if one is waiting. IPv6 sources are discarded.
    /// Oversized datagrams are returned truncated to one byte past the limit
    /// so the caller can recognise and drop them.
    pub fn try_recv(&self) -> Result<Option<(Vec<u8>, Endpoint)>, TransportError> {
        let mut buf = [0u8; MAX_DATAGRAM + 1];
        loop {
            match self.socket.recv_from(&mut buf) {
                Ok((n, SocketAddr::V4(src))) => return Ok(Some((buf[..n].to_vec(), Endpoint::Net(src)))),
                Ok((_, SocketAddr::V6(_))) => continue,
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => return Ok(None),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                // ICMP port-unreachable from an earlier send surfaces here on some systems.
                Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl DatagramTransport for UdpTransport {
    fn send_datagram(&mut self, to: Endpoint, bytes: &[u8]) -> Result<(), TransportError> {
        check_size(bytes)?;
        let Endpoint::Net(addr) = to else {
            return Err(TransportError::WrongEndpointKind(to));
        };
        match self.socket.send_to(bytes, SocketAddr::V4(addr)) {
            Ok(_) => Ok(()),
            // A full send buffer is indistinguishable from loss; retransmission covers it.
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => Ok(()),
            Err(e) => Err(e.into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::Ipv4Addr;

    #[test]
    fn loopback_datagram() {
        let lo = SocketAddrV4::new(Ipv4Addr::LOCALHOST, 0);
        let a = UdpTransport::bind(lo).unwrap();
        let mut b = UdpTransport::bind(lo).unwrap();
        let SocketAddr::V4(a_addr) = a.local_addr().unwrap() else { unreachable!() };
        b.send_datagram(Endpoint::Net(a_addr), b"hello").unwrap();
        let mut got = None;
        for _ in 0..200 {
            if let Some(x) = a.try_recv().unwrap() {
                got = Some(x);
                break;
            }
            std::thread::sleep(std::time::Duration::from_millis(5));
        }
        let (bytes, _) = got.expect("datagram arrived");
        assert_eq!(bytes, b"hello");
        assert!(matches!(
            b.send_datagram(Endpoint::Sim(1), b"x"),
            Err(TransportError::WrongEndpointKind(_))
        ));
    }
}
