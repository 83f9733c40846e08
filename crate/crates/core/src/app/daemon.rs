//! Event loop for a real node: UDP socket, loopback control port and stdin.

use std::collections::HashMap;
use std::io::{self, BufRead, Read, Write};
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use mio::net::{TcpListener, TcpStream};
use mio::{Events, Interest, Poll, Token, Waker};

use super::control::{decode_request, ControlEvent};
use super::{Action, AppError, Config, Mode, Node, NodeOptions, QuitReason};
use crate::transport::{DatagramTransport, Endpoint, UdpTransport};
use crate::vault::DirStore;

const UDP: Token = Token(0);
const LISTENER: Token = Token(1);
const WAKER: Token = Token(2);
const FIRST_CONN: usize = 16;

/// How the loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    /// Vault written back and unlocked.
    Clean,
    /// `/Z`: nothing was written back and the lock remains.
    Crashed,
}

/// Lets another thread (a signal handler, say) stop the loop cleanly.
#[derive(Clone)]
pub struct StopHandle {
    stop: Arc<AtomicBool>,
    waker: Arc<Waker>,
}

impl StopHandle {
    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.waker.wake();
    }
}

struct Conn {
    stream: TcpStream,
    inbuf: Vec<u8>,
    outbuf: Vec<u8>,
    subscribed: bool,
}

pub struct Daemon {
    poll: Poll,
    udp: UdpTransport,
    listener: Option<TcpListener>,
    conns: HashMap<Token, Conn>,
    next_conn: usize,
    node: Option<Node>,
    epoch: Instant,
    stop: Arc<AtomicBool>,
    waker: Arc<Waker>,
    stdin: Option<mpsc::Receiver<String>>,
    echo: bool,
}

/// First IPv4 address for `host:port`.
pub fn resolve_v4(host: &str, port: u16) -> io::Result<SocketAddrV4> {
    (host, port)
        .to_socket_addrs()?
        .find_map(|a| match a {
            SocketAddr::V4(v4) => Some(v4),
            SocketAddr::V6(_) => None,
        })
        .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("no IPv4 address for {host}")))
}

impl Daemon {
    /// Open the vault named in `config` and bind its sockets.
    pub fn new(config: Config, opts: NodeOptions) -> Result<Daemon, AppError> {
        let server = match (config.mode, &config.server_addr, config.server_port) {
            (Mode::Client, Some(host), Some(port)) => Some(Endpoint::Net(resolve_v4(host, port)?)),
            _ => None,
        };
        let poll = Poll::new()?;
        let mut udp = UdpTransport::bind(SocketAddrV4::new(Ipv4Addr::UNSPECIFIED, config.listen_port))
            .map_err(|e| AppError::Other(format!("cannot listen on UDP {}: {e}", config.listen_port)))?;
        udp.register(poll.registry(), UDP)?;
        let mut listener = match config.control_port {
            Some(p) => Some(TcpListener::bind(SocketAddr::V4(SocketAddrV4::new(Ipv4Addr::LOCALHOST, p)))?),
            None => None,
        };
        if let Some(l) = listener.as_mut() {
            poll.registry().register(l, LISTENER, Interest::READABLE)?;
        }
        let waker = Arc::new(Waker::new(poll.registry(), WAKER)?);
        let store = Box::new(DirStore::new(config.vault_path.clone()));
        let epoch = Instant::now();
        let node = Node::start(config, store, server, opts, Duration::ZERO)?;
        Ok(Daemon {
            poll,
            udp,
            listener,
            conns: HashMap::new(),
            next_conn: FIRST_CONN,
            node: Some(node),
            epoch,
            stop: Arc::new(AtomicBool::new(false)),
            waker,
            stdin: None,
            echo: false,
        })
    }

    pub fn stop_handle(&self) -> StopHandle {
        StopHandle { stop: self.stop.clone(), waker: self.waker.clone() }
    }

    pub fn udp_addr(&self) -> io::Result<SocketAddr> {
        self.udp.local_addr()
    }

    pub fn control_addr(&self) -> Option<SocketAddr> {
        self.listener.as_ref().and_then(|l| l.local_addr().ok())
    }

    /// Read operator lines from stdin and print events to stdout.
    pub fn attach_terminal(&mut self) {
        let (tx, rx) = mpsc::channel();
        let waker = self.waker.clone();
        std::thread::spawn(move || {
            for line in io::stdin().lock().lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
                let _ = waker.wake();
            }
        });
        self.stdin = Some(rx);
        self.echo = true;
    }

    fn now(&self) -> Duration {
        self.epoch.elapsed()
    }

    fn node(&mut self) -> &mut Node {
        self.node.as_mut().expect("node present until the loop ends")
    }

    pub fn run(mut self) -> Result<Outcome, AppError> {
        let mut events = Events::with_capacity(64);
        self.flush();
        loop {
            if self.stop.load(Ordering::SeqCst) {
                break;
            }
            if let Some(r) = self.node().quit_reason() {
                log::info!("leaving: {r:?}");
                break;
            }
            let now = self.now();
            let timeout = self.node().next_deadline().map(|d| d.saturating_sub(now));
            match self.poll.poll(&mut events, timeout) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
            let mut crashed = false;
            for ev in events.iter() {
                match ev.token() {
                    UDP => self.drain_udp(),
                    LISTENER => self.accept(),
                    WAKER => crashed |= self.drain_stdin(),
                    t => crashed |= self.service_conn(t, ev.is_readable(), ev.is_writable()),
                }
            }
            let now = self.now();
            self.node().on_timer(now);
            self.flush();
            if crashed {
                self.node.take().expect("present").crash();
                return Ok(Outcome::Crashed);
            }
        }
        let node = self.node.take().expect("present");
        let q = node.quit_reason();
        node.shutdown()?;
        if q == Some(QuitReason::RemoteQuit) && self.echo {
            println!("remote end quit");
        }
        Ok(Outcome::Clean)
    }

    fn drain_udp(&mut self) {
        loop {
            match self.udp.try_recv() {
                Ok(Some((bytes, src))) => {
                    let now = self.now();
                    self.node().on_datagram(&bytes, src, now);
                }
                Ok(None) => break,
                Err(e) => {
                    log::warn!("udp receive: {e}");
                    break;
                }
            }
        }
    }

    fn drain_stdin(&mut self) -> bool {
        let lines: Vec<String> = match &self.stdin {
            Some(rx) => rx.try_iter().collect(),
            None => return false,
        };
        for line in lines {
            let now = self.now();
            if let Ok(Action::Crash) = self.node().handle_line(&line, now) {
                return true;
            }
        }
        false
    }

    fn accept(&mut self) {
        let Some(listener) = self.listener.as_ref() else { return };
        loop {
            match listener.accept() {
                Ok((mut stream, _)) => {
                    let token = Token(self.next_conn);
                    self.next_conn += 1;
                    if self.poll.registry().register(&mut stream, token, Interest::READABLE | Interest::WRITABLE).is_ok() {
                        self.conns.insert(token, Conn { stream, inbuf: Vec::new(), outbuf: Vec::new(), subscribed: false });
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                Err(e) => {
                    log::warn!("control accept: {e}");
                    break;
                }
            }
        }
    }

    fn service_conn(&mut self, token: Token, readable: bool, writable: bool) -> bool {
        let mut closed = false;
        let mut lines = Vec::new();
        if let Some(c) = self.conns.get_mut(&token) {
            if readable {
                let mut buf = [0u8; 4096];
                loop {
                    match c.stream.read(&mut buf) {
                        Ok(0) => {
                            closed = true;
                            break;
                        }
                        Ok(n) => c.inbuf.extend_from_slice(&buf[..n]),
                        Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                        Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                        Err(_) => {
                            closed = true;
                            break;
                        }
                    }
                }
                while let Some(i) = c.inbuf.iter().position(|&b| b == b'\n') {
                    let line: Vec<u8> = c.inbuf.drain(..=i).collect();
                    lines.push(String::from_utf8_lossy(&line).into_owned());
                }
            }
            if writable {
                closed |= write_out(c).is_err();
            }
        }
        let mut crashed = false;
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            match decode_request(&line) {
                Ok(req) => {
                    if matches!(req, super::ControlRequest::Subscribe) {
                        if let Some(c) = self.conns.get_mut(&token) {
                            c.subscribed = true;
                        }
                    }
                    let now = self.now();
                    crashed |= self.node().handle_request(req, now) == Action::Crash;
                }
                Err(ev) => {
                    let text = self.node().encode_event(&ev);
                    if let Some(c) = self.conns.get_mut(&token) {
                        c.outbuf.extend_from_slice(text.as_bytes());
                    }
                }
            }
        }
        if closed {
            if let Some(mut c) = self.conns.remove(&token) {
                let _ = self.poll.registry().deregister(&mut c.stream);
            }
        }
        crashed
    }

    fn flush(&mut self) {
        let node = self.node.as_mut().expect("present");
        for (to, bytes) in node.take_sends() {
            if let Err(e) = self.udp.send_datagram(to, &bytes) {
                log::warn!("send to {to}: {e}");
            }
        }
        let events = node.take_events();
        for ev in &events {
            if self.echo {
                println!("{}", render_event(ev));
            }
            let line = node.encode_event(ev);
            for c in self.conns.values_mut().filter(|c| c.subscribed) {
                c.outbuf.extend_from_slice(line.as_bytes());
            }
        }
        let _ = io::stdout().flush();
        let dead: Vec<Token> = self.conns.iter_mut().filter_map(|(t, c)| write_out(c).is_err().then_some(*t)).collect();
        for t in dead {
            if let Some(mut c) = self.conns.remove(&t) {
                let _ = self.poll.registry().deregister(&mut c.stream);
            }
        }
    }
}

fn write_out(c: &mut Conn) -> io::Result<()> {
    while !c.outbuf.is_empty() {
        match c.stream.write(&c.outbuf) {
            Ok(0) => return Err(io::ErrorKind::WriteZero.into()),
            Ok(n) => {
                c.outbuf.drain(..n);
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => return Ok(()),
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// Terminal rendering of a control event.
pub fn render_event(ev: &ControlEvent) -> String {
    match ev {
        ControlEvent::ChatIn { session, text } => format!("[{session:05}] {text}"),
        ControlEvent::ChatEcho { session, text } => format!("[{session:05}] > {text}"),
        ControlEvent::SessionList { selected, sessions } => {
            let mut s = String::from("sessions:");
            for v in sessions {
                let mark = if Some(v.pad) == *selected { '*' } else { ' ' };
                let remote = v.remote.map(|r| r.to_string()).unwrap_or_else(|| "-".into());
                s.push_str(&format!("\n {mark}{:05} {:?} {remote}{}", v.pad, v.phase, if v.blocked { " (waiting)" } else { "" }));
            }
            s
        }
        ControlEvent::VaultRows { text, .. } => text.trim_end().to_string(),
        ControlEvent::TransferProgress { session, direction, name, done, total, finished, elapsed_ms, .. } => {
            let arrow = match direction {
                super::TransferDirection::Out => "->",
                super::TransferDirection::In => "<-",
            };
            match (finished, elapsed_ms) {
                (true, Some(ms)) => format!("[{session:05}] {arrow} {name}: {done}/{total} bytes, {:.2} s", *ms as f64 / 1000.0),
                (true, None) => format!("[{session:05}] {arrow} {name}: {done}/{total} bytes, done"),
                _ => format!("[{session:05}] {arrow} {name}: {done}/{total} bytes"),
            }
        }
        ControlEvent::Status { session: Some(s), text } => format!("[{s:05}] {text}"),
        ControlEvent::Status { session: None, text } => text.clone(),
        ControlEvent::Error { session, code, message } => match session {
            Some(s) => format!("[{s:05}] error ({code}): {message}"),
            None => format!("error ({code}): {message}"),
        },
    }
}

/// Read a config file and run until quit or stop.
pub fn run_config_file(path: &std::path::Path, opts: NodeOptions, terminal: bool) -> Result<Outcome, AppError> {
    let text = std::fs::read_to_string(path)?;
    let config = super::parse_config(&text)?;
    let mut d = Daemon::new(config, opts)?;
    if terminal {
        d.attach_terminal();
    }
    d.run()
}
