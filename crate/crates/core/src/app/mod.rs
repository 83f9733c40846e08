//! The node: vault, sessions, operator commands, file transfer and hub duties
//! behind one interface that both the daemon and the simulator drive.

pub mod command;
pub mod config;
pub mod control;
#[cfg(not(target_arch = "wasm32"))]
pub mod daemon;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::hub::{
    self, Assembly, ClientRegistry, DistItem, DistributionManifest, DistributionRecord, DistributionStatus, HubError,
};
use crate::hygiene::SecretBuf;
use crate::session::{
    chunk_lengths, decode_sessions, encode_sessions, CorruptSessionData, Disposition, Output, PacketType, Queued,
    SendError, Session, SessionEvent, SessionSet, MAX_PAYLOAD,
};
use crate::transport::Endpoint;
use crate::vault::{
    ConsumeRecord, Direction, PageStore, Role, Vault, VaultError, VaultOptions, RESERVE_PAD,
};

pub use command::{parse_command, Command, ParseError, HELP};
pub use config::{parse_config, Config, ConfigError, Mode};
pub use control::{
    ControlEvent, ControlRequest, SessionView, TransferDirection, TransferKind, VaultRow, SCHEMA_VERSION,
};

/// Completed calls to [`Node::shutdown`], process-wide.
pub static SHUTDOWNS: AtomicU64 = AtomicU64::new(0);

pub const EXIT_OK: i32 = 0;
pub const EXIT_VAULT_LOCKED: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_OTHER: i32 = 1;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("vault {0} is locked; a previous run did not exit cleanly. Recover both ends before restarting.")]
    VaultLocked(String),
    #[error(transparent)]
    Vault(VaultError),
    #[error("session state: {0}")]
    CorruptSession(#[from] CorruptSessionData),
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Other(String),
}

impl From<VaultError> for AppError {
    fn from(e: VaultError) -> Self {
        match e {
            VaultError::VaultLocked(s) => AppError::VaultLocked(s),
            e => AppError::Vault(e),
        }
    }
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::VaultLocked(_) => EXIT_VAULT_LOCKED,
            AppError::Config(_) => EXIT_CONFIG,
            _ => EXIT_OTHER,
        }
    }
}

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("no session selected; use /N first")]
    NoSessionSelected,
    #[error("no session for pad {0:05}")]
    NoSuchSession(u32),
    #[error("session {0:05} is waiting for an acknowledgement; try again later or /f to forget it")]
    RejectedWhileBlocked(u32),
    #[error("session {0:05} is not connected; /c first")]
    NotConnected(u32),
    #[error("no address known for session {0:05}")]
    NoRemote(u32),
    #[error("pad {0:05} has no transmit pages left")]
    PadExhausted(u32),
    #[error("session {0:05} halted after a page-turn error")]
    Halted(u32),
    #[error("nothing to abort")]
    NothingToAbort,
    #[error("no acknowledgement is pending")]
    NothingPending,
    #[error("/Z is only available in test builds")]
    CrashDisabled,
    #[error("cannot read {path}: {source}")]
    LocalReadFailure { path: String, source: io::Error },
    #[error(transparent)]
    Hub(#[from] HubError),
    #[error(transparent)]
    Vault(#[from] VaultError),
}

impl CommandError {
    pub fn code(&self) -> &'static str {
        match self {
            CommandError::Parse(ParseError::UnknownCommand(_)) => "unknown-command",
            CommandError::Parse(_) => "bad-argument",
            CommandError::NoSessionSelected => "no-session-selected",
            CommandError::NoSuchSession(_) => "no-such-session",
            CommandError::RejectedWhileBlocked(_) => "rejected-while-blocked",
            CommandError::NotConnected(_) => "not-connected",
            CommandError::NoRemote(_) => "no-remote",
            CommandError::PadExhausted(_) => "pad-exhausted",
            CommandError::Halted(_) => "halted",
            CommandError::NothingToAbort => "nothing-to-abort",
            CommandError::NothingPending => "nothing-pending",
            CommandError::CrashDisabled => "crash-disabled",
            CommandError::LocalReadFailure { .. } => "local-read-failure",
            CommandError::Hub(HubError::ClientUnreachable(_)) => "client-unreachable",
            CommandError::Hub(HubError::Vault(VaultError::ReserveExhausted { .. })) => "reserve-exhausted",
            CommandError::Hub(_) => "hub",
            CommandError::Vault(_) => "vault",
        }
    }

    fn from_send(e: SendError) -> CommandError {
        match e {
            SendError::Blocked(p) => CommandError::RejectedWhileBlocked(p),
            SendError::NotConnected(p) => CommandError::NotConnected(p),
            SendError::PadExhausted(p) => CommandError::PadExhausted(p),
            SendError::Halted(p) => CommandError::Halted(p),
            SendError::UnknownSession(p) => CommandError::NoSuchSession(p),
            SendError::Vault(v) => CommandError::Vault(v),
            SendError::Codec(c) => CommandError::Vault(VaultError::Io(io::Error::other(c.to_string()))),
        }
    }
}

/// What the caller must do after a command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Continue,
    /// `/Z`: stop immediately without any cleanup.
    Crash,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuitReason {
    /// Our `/q` was acknowledged.
    LocalQuit,
    /// The peer sent `/q`.
    RemoteQuit,
}

/// Knobs that are not part of the config file.
#[derive(Debug, Clone, Default)]
pub struct NodeOptions {
    pub label: String,
    pub scrub_seed: Option<u64>,
    pub gibberish_seed: Option<u64>,
    pub log_consumption: bool,
    pub log_hygiene: bool,
    /// Permit `/Z`.
    pub allow_crash: bool,
    /// Check every control frame for loaded key bytes.
    pub audit_control: bool,
    /// Keep raw session events for inspection.
    pub keep_session_events: bool,
}

#[derive(Debug)]
struct OutTransfer {
    pad: u32,
    kind: TransferKind,
    name: String,
    sizes: VecDeque<u64>,
    done: u64,
    total: u64,
    started: Duration,
    dist: Option<(usize, usize)>,
}

#[derive(Debug)]
enum Sink {
    File { path: PathBuf, file: fs::File },
    Secret(SecretBuf),
}

#[derive(Debug)]
struct InTransfer {
    name: String,
    dist: Option<DistItem>,
    sink: Sink,
    done: u64,
    total: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ShutdownReport {
    pub sessions: usize,
    pub pending: usize,
}

pub struct Node {
    config: Config,
    opts: NodeOptions,
    vault: Vault,
    sessions: SessionSet,
    selected: Option<u32>,
    registry: ClientRegistry,
    rng: ChaCha8Rng,
    next_transfer: u64,
    outgoing: BTreeMap<u64, OutTransfer>,
    incoming: HashMap<u32, InTransfer>,
    assemblies: BTreeMap<u32, Assembly>,
    distributions: Vec<DistributionRecord>,
    sends: Vec<(Endpoint, Vec<u8>)>,
    events: Vec<ControlEvent>,
    session_log: Vec<SessionEvent>,
    quit: Option<QuitReason>,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node").field("label", &self.opts.label).field("mode", &self.config.mode).finish()
    }
}

impl Node {
    /// Open the vault, restore session state and re-send anything that was
    /// waiting for an acknowledgement.
    pub fn start(
        config: Config,
        store: Box<dyn PageStore>,
        server: Option<Endpoint>,
        opts: NodeOptions,
        now: Duration,
    ) -> Result<Node, AppError> {
        let vault = Vault::open_boxed(
            store,
            VaultOptions {
                have_mercy: config.have_mercy,
                delete_turned_pages: config.delete_turned_pages,
                scrub_seed: opts.scrub_seed,
                log_hygiene: opts.log_hygiene,
                log_consumption: opts.log_consumption,
                label: opts.label.clone(),
            },
        )?;
        let mut vault = vault;
        let snapshots = match vault.read_session_file().map(|b| b.unwrap_or_default()) {
            Ok(bytes) => match decode_sessions(&bytes) {
                Ok((s, _)) => s,
                Err(e) => {
                    let _ = vault.persist_on_shutdown(None);
                    return Err(e.into());
                }
            },
            Err(e) => {
                let _ = vault.persist_on_shutdown(None);
                return Err(e.into());
            }
        };
        // Anything restored now lives only in memory until the next clean exit.
        vault.write_session_file(&[])?;
        if let Some(dir) = &config.rx_files_dir {
            fs::create_dir_all(dir)?;
        }

        let mut restored: BTreeMap<u32, _> = snapshots.into_iter().map(|s| (s.pad_id, s)).collect();
        let mut sessions = SessionSet::new();
        for pad in vault.pad_ids() {
            if pad == RESERVE_PAD {
                continue;
            }
            let session = match restored.remove(&pad) {
                Some(snap) => Session::from_snapshot(snap, config.timers)?,
                None => {
                    let (remote, role) = match config.mode {
                        Mode::Server => (None, Some(Role::A)),
                        Mode::Client if Some(pad) == config.user_pad => (server, Some(Role::B)),
                        Mode::Client => (None, None),
                    };
                    Session::new(pad, remote, role, config.timers)
                }
            };
            sessions.insert(session);
        }
        let selected = match config.mode {
            Mode::Client => config.user_pad.filter(|p| sessions.get(*p).is_some()),
            Mode::Server => None,
        }
        .or_else(|| sessions.pads().first().copied());
        let seed = opts.gibberish_seed.unwrap_or_else(rand::random);
        let mut node = Node {
            config,
            opts,
            vault,
            sessions,
            selected,
            registry: ClientRegistry::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_transfer: 1,
            outgoing: BTreeMap::new(),
            incoming: HashMap::new(),
            assemblies: BTreeMap::new(),
            distributions: Vec::new(),
            sends: Vec::new(),
            events: Vec::new(),
            session_log: Vec::new(),
            quit: None,
        };
        let mut out = Vec::new();
        for s in node.sessions.iter_mut() {
            s.resume(now, &mut out);
        }
        node.absorb(out, now);
        node.push_session_list();
        Ok(node)
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn vault(&self) -> &Vault {
        &self.vault
    }

    pub fn vault_mut(&mut self) -> &mut Vault {
        &mut self.vault
    }

    pub fn sessions(&self) -> &SessionSet {
        &self.sessions
    }

    pub fn selected(&self) -> Option<u32> {
        self.selected
    }

    pub fn registry(&self) -> &ClientRegistry {
        &self.registry
    }

    pub fn distributions(&self) -> &[DistributionRecord] {
        &self.distributions
    }

    pub fn quit_reason(&self) -> Option<QuitReason> {
        self.quit
    }

    pub fn hmac_evals(&self) -> u64 {
        self.sessions.hmac_evals
    }

    pub fn next_deadline(&self) -> Option<Duration> {
        self.sessions.next_deadline()
    }

    pub fn take_sends(&mut self) -> Vec<(Endpoint, Vec<u8>)> {
        std::mem::take(&mut self.sends)
    }

    pub fn take_events(&mut self) -> Vec<ControlEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn take_session_events(&mut self) -> Vec<SessionEvent> {
        std::mem::take(&mut self.session_log)
    }

    pub fn take_consume_log(&mut self) -> Vec<ConsumeRecord> {
        self.vault.take_consume_log()
    }

    /// Encode an event for the control API.
    pub fn encode_event(&self, ev: &ControlEvent) -> String {
        let line = control::encode_event(ev);
        if self.opts.audit_control {
            assert!(!self.contains_key_material(line.as_bytes()), "key material in control frame");
        }
        line
    }

    /// Whether any 16-byte run of a loaded page appears in `bytes`.
    pub fn contains_key_material(&self, bytes: &[u8]) -> bool {
        const W: usize = 16;
        if bytes.len() < W {
            return false;
        }
        let windows: std::collections::HashSet<&[u8]> = bytes.windows(W).collect();
        self.vault.pad_ids().into_iter().any(|pad| {
            [Direction::Tx, Direction::Rx].into_iter().any(|dir| {
                self.vault
                    .loaded_page(pad, dir)
                    .is_some_and(|p| p.bytes().windows(W).any(|w| windows.contains(w)))
            })
        })
    }

    pub fn on_datagram(&mut self, bytes: &[u8], src: Endpoint, now: Duration) -> Disposition {
        let mut out = Vec::new();
        let d = self.sessions.on_datagram(&mut self.vault, bytes, src, now, &mut out);
        self.absorb(out, now);
        d
    }

    pub fn on_timer(&mut self, now: Duration) {
        let mut out = Vec::new();
        self.sessions.on_timer(now, &mut out);
        self.absorb(out, now);
    }

    /// Run one operator line. Errors are also reported as control events.
    pub fn handle_line(&mut self, line: &str, now: Duration) -> Result<Action, CommandError> {
        self.handle_line_for(None, line, now)
    }

    /// As [`Node::handle_line`], aimed at `session` when given.
    pub fn handle_line_for(&mut self, session: Option<u32>, line: &str, now: Duration) -> Result<Action, CommandError> {
        let res = parse_command(line)
            .map_err(CommandError::from)
            .and_then(|c| match c {
                Some(c) => self.run_command(session, c, now),
                None => Ok(Action::Continue),
            });
        if let Err(e) = &res {
            self.events.push(ControlEvent::Error {
                session: session.or(self.selected),
                code: e.code().into(),
                message: e.to_string(),
            });
        }
        res
    }

    /// Dispatch one control API request.
    pub fn handle_request(&mut self, req: ControlRequest, now: Duration) -> Action {
        match req {
            ControlRequest::Subscribe => {
                self.push_session_list();
                Action::Continue
            }
            ControlRequest::Command { line, session } => {
                self.handle_line_for(session, &line, now).unwrap_or(Action::Continue)
            }
            ControlRequest::Chat { text, session } => {
                let target = session.or(self.selected);
                let res = target
                    .ok_or(CommandError::NoSessionSelected)
                    .and_then(|pad| self.chat(pad, &text, now));
                if let Err(e) = res {
                    self.events.push(ControlEvent::Error {
                        session: target,
                        code: e.code().into(),
                        message: e.to_string(),
                    });
                }
                Action::Continue
            }
        }
    }

    fn target(&self, session: Option<u32>) -> Result<u32, CommandError> {
        let pad = session.or(self.selected).ok_or(CommandError::NoSessionSelected)?;
        if self.sessions.get(pad).is_none() {
            return Err(CommandError::NoSuchSession(pad));
        }
        Ok(pad)
    }

    fn run_command(&mut self, session: Option<u32>, cmd: Command, now: Duration) -> Result<Action, CommandError> {
        match cmd {
            Command::Help => self.status(None, HELP.to_string()),
            Command::Select(pad) => {
                if self.sessions.get(pad).is_none() {
                    return Err(CommandError::NoSuchSession(pad));
                }
                self.selected = Some(pad);
                self.status(Some(pad), format!("using session {pad:05}"));
                self.push_session_list();
            }
            Command::Chat(text) => {
                let pad = self.target(session)?;
                self.chat(pad, &text, now)?;
            }
            Command::Connect => {
                let pad = self.target(session)?;
                let s = self.sessions.get_mut(pad).expect("target checked");
                if s.is_blocked() {
                    return Err(CommandError::RejectedWhileBlocked(pad));
                }
                if s.remote().is_none() {
                    return Err(CommandError::NoRemote(pad));
                }
                let mut out = Vec::new();
                s.connect(&mut self.vault, now, &mut out);
                self.absorb(out, now);
                self.status(Some(pad), "probing".into());
            }
            Command::Disconnect => {
                let pad = self.target(session)?;
                let s = self.sessions.get_mut(pad).expect("target checked");
                if s.remote().is_none() {
                    return Err(CommandError::NoRemote(pad));
                }
                let mut out = Vec::new();
                s.disconnect(&mut self.vault, now, &mut out);
                self.absorb(out, now);
            }
            Command::Forget => {
                let pad = self.target(session)?;
                let mut out = Vec::new();
                let had = self.sessions.get_mut(pad).expect("target checked").forget_pending(
                    &mut self.vault,
                    now,
                    &mut out,
                );
                self.absorb(out, now);
                if !had {
                    return Err(CommandError::NothingPending);
                }
            }
            Command::Abort => {
                let pad = self.target(session)?;
                self.abort(pad, now)?;
            }
            Command::Gibberish(n) => {
                let pad = self.target(session)?;
                self.send_gibberish(pad, n, now)?;
            }
            Command::Send(path) => {
                let pad = self.target(session)?;
                self.send_path(pad, Path::new(&path), now)?;
            }
            Command::Quit => {
                let pad = self.target(session)?;
                let s = self.sessions.get_mut(pad).expect("target checked");
                if s.remote().is_none() {
                    return Err(CommandError::NoRemote(pad));
                }
                let mut out = Vec::new();
                s.quit(&mut self.vault, now, &mut out);
                self.absorb(out, now);
            }
            Command::Vault => {
                let rows = self.vault_report();
                let text = vault_report_text(&rows);
                self.events.push(ControlEvent::VaultRows { rows, text });
            }
            Command::Batch => {
                for line in self.config.batch.clone() {
                    if parse_command(&line) == Ok(Some(Command::Batch)) {
                        continue;
                    }
                    let _ = self.handle_line_for(None, &line, now);
                }
            }
            Command::Crash => {
                if !self.opts.allow_crash {
                    return Err(CommandError::CrashDisabled);
                }
                return Ok(Action::Crash);
            }
            Command::Distribute { a, b, pages, pad } => {
                self.distribute_pad(a, b, pages, pad, now)?;
            }
        }
        Ok(Action::Continue)
    }

    fn status(&mut self, session: Option<u32>, text: String) {
        self.events.push(ControlEvent::Status { session, text });
    }

    fn push_session_list(&mut self) {
        let sessions = self
            .sessions
            .iter()
            .map(|s| SessionView {
                pad: s.pad_id,
                phase: s.phase(),
                blocked: s.is_blocked(),
                halted: s.is_halted(),
                remote: s.remote(),
                controls_page_turns: s.is_coordinator(&self.vault),
                queued: s.queued_len(),
            })
            .collect();
        self.events.push(ControlEvent::SessionList { selected: self.selected, sessions });
    }

    /// Rows as `pad.metadata` would hold them now, with a page-turn control flag.
    pub fn vault_report(&self) -> Vec<VaultRow> {
        self.vault
            .rows()
            .into_iter()
            .map(|meta| VaultRow {
                controls_page_turns: match self.sessions.get(meta.pad_id) {
                    Some(s) => s.is_coordinator(&self.vault),
                    None => meta.controls_page_turns(),
                },
                meta,
            })
            .collect()
    }

    fn enqueue(&mut self, pad: u32, items: Vec<Queued>, now: Duration) -> Result<(), CommandError> {
        let s = self.sessions.get_mut(pad).ok_or(CommandError::NoSuchSession(pad))?;
        let mut out = Vec::new();
        let res = s.enqueue(&mut self.vault, items, now, &mut out);
        self.absorb(out, now);
        res.map_err(CommandError::from_send)
    }

    pub fn chat(&mut self, pad: u32, text: &str, now: Duration) -> Result<(), CommandError> {
        if text.is_empty() {
            return Ok(());
        }
        let bytes = text.as_bytes();
        let mut items = Vec::new();
        let mut at = 0;
        for len in chunk_lengths(bytes.len(), MAX_PAYLOAD) {
            items.push(Queued::new(PacketType::Chat, bytes[at..at + len].to_vec()));
            at += len;
        }
        self.enqueue(pad, items, now)?;
        self.events.push(ControlEvent::ChatEcho { session: pad, text: text.to_string() });
        Ok(())
    }

    fn new_transfer(&mut self, t: OutTransfer) -> u64 {
        let id = self.next_transfer;
        self.next_transfer += 1;
        self.outgoing.insert(id, t);
        id
    }

    /// `/gN`: N plaintext bytes in total, type bytes included.
    pub fn send_gibberish(&mut self, pad: u32, n: u64, now: Duration) -> Result<(), CommandError> {
        let lens = chunk_lengths(n as usize, MAX_PAYLOAD + 1);
        let id = self.next_transfer;
        let mut items = Vec::with_capacity(lens.len());
        for &len in &lens {
            let mut payload = vec![0u8; len - 1];
            self.rng.fill_bytes(&mut payload);
            items.push(Queued::new(PacketType::Gibberish, payload).in_transfer(id));
        }
        self.enqueue(pad, items, now)?;
        self.new_transfer(OutTransfer {
            pad,
            kind: TransferKind::Gibberish,
            name: format!("gibberish {n}"),
            sizes: lens.iter().map(|&l| l as u64).collect(),
            done: 0,
            total: n,
            started: now,
            dist: None,
        });
        Ok(())
    }

    /// `/s`: a file is sent, a directory is listed.
    pub fn send_path(&mut self, pad: u32, path: &Path, now: Duration) -> Result<(), CommandError> {
        let fail = |source| CommandError::LocalReadFailure { path: path.display().to_string(), source };
        let meta = fs::metadata(path).map_err(fail)?;
        if meta.is_dir() {
            let mut names: Vec<String> = fs::read_dir(path)
                .map_err(fail)?
                .filter_map(|e| e.ok())
                .map(|e| {
                    let mut n = e.file_name().to_string_lossy().into_owned();
                    if e.file_type().is_ok_and(|t| t.is_dir()) {
                        n.push('/');
                    }
                    n
                })
                .collect();
            names.sort();
            let text = format!("{}:\n{}", path.display(), names.join("\n"));
            let id = self.next_transfer;
            let bytes = text.into_bytes();
            let (items, sizes) = chunked(PacketType::DirListing, &bytes, id);
            self.enqueue(pad, items, now)?;
            self.new_transfer(OutTransfer {
                pad,
                kind: TransferKind::Listing,
                name: path.display().to_string(),
                sizes,
                done: 0,
                total: bytes.len() as u64,
                started: now,
                dist: None,
            });
            return Ok(());
        }
        let data = fs::read(path).map_err(fail)?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "file".into());
        let id = self.next_transfer;
        let (items, sizes) = file_items(&name, &data, id);
        self.enqueue(pad, items, now)?;
        self.new_transfer(OutTransfer {
            pad,
            kind: TransferKind::File,
            name,
            sizes,
            done: 0,
            total: data.len() as u64,
            started: now,
            dist: None,
        });
        Ok(())
    }

    fn abort(&mut self, pad: u32, now: Duration) -> Result<(), CommandError> {
        let mut out = Vec::new();
        let s = self.sessions.get_mut(pad).expect("caller checked");
        let mut any = s.abort_transfer(&mut self.vault, now, &mut out);
        if self.incoming.contains_key(&pad) {
            s.reject_transfer(&mut self.vault, now, &mut out);
            self.drop_incoming(pad, "aborted");
            any = true;
        }
        self.absorb(out, now);
        if any {
            self.finish_outgoing_for(pad, now, false);
            self.status(Some(pad), "transfer aborted".into());
            Ok(())
        } else {
            Err(CommandError::NothingToAbort)
        }
    }

    /// `/x`: carve reserve pages and ship them to two clients.
    pub fn distribute_pad(
        &mut self,
        a: u32,
        b: u32,
        pages: u32,
        pad: Option<u32>,
        now: Duration,
    ) -> Result<u32, CommandError> {
        if self.config.mode != Mode::Server {
            return Err(HubError::NotAHub.into());
        }
        if a == b {
            return Err(HubError::SameClient.into());
        }
        let mut peers = [None; 2];
        for (i, c) in [a, b].into_iter().enumerate() {
            let s = self.sessions.get(c).ok_or(CommandError::NoSuchSession(c))?;
            if s.phase() != crate::session::Phase::Connected || s.remote().is_none() {
                return Err(HubError::ClientUnreachable(c).into());
            }
            if s.is_busy() {
                return Err(HubError::ClientBusy(c).into());
            }
            peers[i] = s.remote();
        }
        let reserve = *self.vault.metadata(RESERVE_PAD).ok_or(VaultError::UnknownPad(RESERVE_PAD))?;
        let first = reserve.tx_pg.min(reserve.pages);
        let highest = self.vault.pad_ids().into_iter().max().unwrap_or(0);
        let new_pad = match pad {
            Some(p) => p,
            None => hub::default_pad_id(highest, first)?,
        };
        if new_pad == RESERVE_PAD || new_pad > crate::vault::MAX_PAD_ID || self.vault.metadata(new_pad).is_some() {
            return Err(HubError::BadPadId(new_pad).into());
        }
        let carved = self.vault.carve_reserve(pages).map_err(HubError::from)?;
        let index = self.distributions.len();
        self.distributions.push(DistributionRecord {
            new_pad,
            client_a: a,
            client_b: b,
            reserve_pages: first..first + pages,
            kb_per_page: reserve.kb_per_page,
            status: DistributionStatus::InFlight,
            acked: [false; 2],
        });
        for (i, (client, role, peer)) in [(a, Role::A, peers[1]), (b, Role::B, peers[0])].into_iter().enumerate() {
            let manifest = DistributionManifest { pad_id: new_pad, kb_per_page: reserve.kb_per_page, pages, role, peer };
            let id = self.next_transfer;
            let text = serde_json::to_vec(&manifest).expect("manifest serializes");
            let (mut items, mut sizes) = file_items(&hub::manifest_name(new_pad), &text, id);
            for (p, page) in carved.iter().enumerate() {
                let (more, more_sizes) = file_items(&hub::page_name(new_pad, p as u32), page.as_slice(), id);
                items.extend(more);
                sizes.extend(more_sizes);
            }
            let total = sizes.iter().sum();
            if let Err(e) = self.enqueue(client, items, now) {
                self.distributions[index].status = DistributionStatus::Failed;
                if i == 1 {
                    let mut out = Vec::new();
                    if let Some(s) = self.sessions.get_mut(a) {
                        s.abort_transfer(&mut self.vault, now, &mut out);
                    }
                    self.absorb(out, now);
                    self.finish_outgoing_for(a, now, false);
                }
                return Err(e);
            }
            self.new_transfer(OutTransfer {
                pad: client,
                kind: TransferKind::Distribution,
                name: format!("pad {new_pad:05}"),
                sizes,
                done: 0,
                total,
                started: now,
                dist: Some((index, i)),
            });
        }
        drop(carved);
        self.status(None, format!("distributing pad {new_pad:05} ({pages} pages) to {a:05} and {b:05}"));
        Ok(new_pad)
    }

    fn absorb(&mut self, outs: Vec<Output>, now: Duration) {
        for o in outs {
            match o {
                Output::Send { to, bytes } => self.sends.push((to, bytes)),
                Output::Event(e) => {
                    if self.opts.keep_session_events {
                        self.session_log.push(e.clone());
                    }
                    self.on_session_event(e, now);
                }
            }
        }
    }

    fn on_session_event(&mut self, e: SessionEvent, now: Duration) {
        match e {
            SessionEvent::Delivered { pad, ptype, payload } => self.on_delivered(pad, ptype, payload, now),
            SessionEvent::Acked { pad, transfer: Some(id), at, .. } => self.on_transfer_ack(pad, id, at),
            SessionEvent::Acked { .. } => {}
            SessionEvent::Connected { pad } => {
                self.status(Some(pad), "connected".into());
                self.push_session_list();
            }
            SessionEvent::Disconnected { pad } => {
                self.drop_incoming(pad, "disconnected");
                self.finish_outgoing_for(pad, now, false);
                self.status(Some(pad), "disconnected".into());
                self.push_session_list();
            }
            SessionEvent::RemoteQuit { pad } => {
                self.status(Some(pad), "remote quit".into());
                self.quit = Some(QuitReason::RemoteQuit);
            }
            SessionEvent::QuitAcked { .. } => self.quit = Some(QuitReason::LocalQuit),
            SessionEvent::RemoteAbort { pad } => {
                self.drop_incoming(pad, "aborted by remote");
                self.finish_outgoing_for(pad, now, false);
                self.status(Some(pad), "remote aborted the transfer".into());
            }
            SessionEvent::AddressLearned { pad, addr } => {
                self.registry.learn_client(pad, addr, now);
                log::info!("pad {pad:05} is at {addr}");
            }
            SessionEvent::GrantCollision { pad, page } => self.events.push(ControlEvent::Error {
                session: Some(pad),
                code: "grant-collision".into(),
                message: format!("page turn to {page} refused; session halted"),
            }),
            SessionEvent::PadExhausted { pad } => self.events.push(ControlEvent::Error {
                session: Some(pad),
                code: "pad-exhausted".into(),
                message: format!("pad {pad:05} has no transmit pages left"),
            }),
            SessionEvent::Dropped { pad, reason } => self.events.push(ControlEvent::Error {
                session: Some(pad),
                code: "dropped".into(),
                message: reason.into(),
            }),
            SessionEvent::PendingForgotten { pad } => self.status(Some(pad), "pending acknowledgement forgotten".into()),
            SessionEvent::Retransmitted { pad, retries, .. } => log::debug!("pad {pad:05}: retry {retries}"),
            SessionEvent::PageTurned { pad, dir, page } => log::debug!("pad {pad:05}: {dir:?} now on page {page}"),
            SessionEvent::Duplicate { pad } => log::debug!("pad {pad:05}: duplicate"),
        }
    }

    fn on_transfer_ack(&mut self, pad: u32, id: u64, at: Duration) {
        let Some(t) = self.outgoing.get_mut(&id) else { return };
        debug_assert_eq!(t.pad, pad);
        t.done += t.sizes.pop_front().unwrap_or(0);
        let finished = t.sizes.is_empty();
        let ev = ControlEvent::TransferProgress {
            session: pad,
            direction: TransferDirection::Out,
            kind: t.kind,
            name: t.name.clone(),
            done: t.done,
            total: t.total,
            finished,
            elapsed_ms: finished.then(|| (at - t.started).as_millis() as u64),
        };
        self.events.push(ev);
        if finished {
            let t = self.outgoing.remove(&id).expect("present above");
            let secs = (at - t.started).as_secs_f64();
            if t.kind == TransferKind::Gibberish {
                self.status(Some(pad), format!("sent {} bytes in {secs:.2} s", t.total));
            }
            if let Some((index, i)) = t.dist {
                let rec = &mut self.distributions[index];
                rec.acked[i] = true;
                if rec.acked == [true, true] && rec.status == DistributionStatus::InFlight {
                    rec.status = DistributionStatus::Done;
                    let p = rec.new_pad;
                    self.status(None, format!("pad {p:05} delivered to both clients"));
                }
            }
        }
    }

    /// Close out any outgoing transfer on `pad` that will not complete.
    fn finish_outgoing_for(&mut self, pad: u32, now: Duration, _completed: bool) {
        let ids: Vec<u64> = self.outgoing.iter().filter(|(_, t)| t.pad == pad).map(|(id, _)| *id).collect();
        for id in ids {
            let t = self.outgoing.remove(&id).expect("listed above");
            if let Some((index, _)) = t.dist {
                self.distributions[index].status = DistributionStatus::Failed;
                self.status(None, format!("distribution of {} failed; carved pages are lost", t.name));
            }
            self.events.push(ControlEvent::TransferProgress {
                session: pad,
                direction: TransferDirection::Out,
                kind: t.kind,
                name: t.name,
                done: t.done,
                total: t.total,
                finished: true,
                elapsed_ms: Some((now - t.started).as_millis() as u64),
            });
        }
    }

    fn drop_incoming(&mut self, pad: u32, why: &str) {
        if let Some(t) = self.incoming.remove(&pad) {
            if let Sink::File { path, file } = t.sink {
                drop(file);
                let _ = fs::remove_file(&path);
            }
            if let Some(DistItem::Manifest { pad: p } | DistItem::Page { pad: p, .. }) = t.dist {
                self.assemblies.remove(&p);
            }
            log::info!("pad {pad:05}: incoming {} {why}", t.name);
        }
    }

    fn reject_incoming(&mut self, pad: u32, now: Duration, code: &str, message: String) {
        let mut out = Vec::new();
        if let Some(s) = self.sessions.get_mut(pad) {
            s.reject_transfer(&mut self.vault, now, &mut out);
        }
        self.absorb(out, now);
        self.events.push(ControlEvent::Error { session: Some(pad), code: code.into(), message });
    }

    fn on_delivered(&mut self, pad: u32, ptype: PacketType, payload: Vec<u8>, now: Duration) {
        match ptype {
            PacketType::Chat | PacketType::DirListing => {
                self.events.push(ControlEvent::ChatIn { session: pad, text: String::from_utf8_lossy(&payload).into() })
            }
            PacketType::Gibberish => {}
            PacketType::FileBegin => self.on_file_begin(pad, &payload, now),
            PacketType::FileData => {
                let mut failed = None;
                if let Some(t) = self.incoming.get_mut(&pad) {
                    t.done += payload.len() as u64;
                    match &mut t.sink {
                        Sink::File { file, .. } => {
                            if let Err(e) = file.write_all(&payload) {
                                failed = Some(e.to_string());
                            }
                        }
                        Sink::Secret(buf) => buf.extend_from_slice(&payload),
                    }
                    if t.dist.is_none() {
                        let ev = ControlEvent::TransferProgress {
                            session: pad,
                            direction: TransferDirection::In,
                            kind: TransferKind::File,
                            name: t.name.clone(),
                            done: t.done,
                            total: t.total,
                            finished: false,
                            elapsed_ms: None,
                        };
                        self.events.push(ev);
                    }
                }
                let mut payload = payload;
                crate::hygiene::scrub_in_place(&mut payload);
                if let Some(msg) = failed {
                    self.drop_incoming(pad, "write failed");
                    self.reject_incoming(pad, now, "local-write-failure", msg);
                }
            }
            PacketType::FileEnd => self.on_file_end(pad, now),
            _ => {}
        }
    }

    fn on_file_begin(&mut self, pad: u32, payload: &[u8], now: Duration) {
        self.drop_incoming(pad, "superseded");
        if payload.len() < 8 {
            return self.reject_incoming(pad, now, "bad-transfer", "file header too short".into());
        }
        let total = u64::from_be_bytes(payload[..8].try_into().expect("8 bytes"));
        let name = String::from_utf8_lossy(&payload[8..]).into_owned();
        if let Some(item) = hub::parse_dist_name(&name) {
            let from_hub = self.config.mode == Mode::Client && Some(pad) == self.config.user_pad;
            let new_pad = match item {
                DistItem::Manifest { pad } | DistItem::Page { pad, .. } => pad,
            };
            if !from_hub || self.vault.metadata(new_pad).is_some() {
                return self.reject_incoming(pad, now, "distribution-refused", format!("refused {name}"));
            }
            if matches!(item, DistItem::Page { .. }) && !self.assemblies.contains_key(&new_pad) {
                return self.reject_incoming(pad, now, "distribution-refused", format!("{name} without manifest"));
            }
            self.incoming.insert(
                pad,
                InTransfer { name, dist: Some(item), sink: Sink::Secret(SecretBuf::new(Vec::new())), done: 0, total },
            );
            return;
        }
        let Some(dir) = self.config.rx_files_dir.clone() else {
            return self.reject_incoming(
                pad,
                now,
                "transfers-disabled",
                format!("incoming file {name:?} refused: no receive directory"),
            );
        };
        let clean = sanitize_name(&name);
        match create_unique(&dir, &clean) {
            Ok((path, file)) => {
                let shown = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or(clean);
                self.incoming.insert(pad, InTransfer { name: shown, dist: None, sink: Sink::File { path, file }, done: 0, total });
            }
            Err(e) => self.reject_incoming(pad, now, "local-write-failure", e.to_string()),
        }
    }

    fn on_file_end(&mut self, pad: u32, now: Duration) {
        let Some(t) = self.incoming.remove(&pad) else { return };
        match (t.dist, t.sink) {
            (None, Sink::File { path, file }) => {
                let ok = file.sync_all().is_ok() && t.done == t.total;
                if !ok {
                    let _ = fs::remove_file(&path);
                    return self.reject_incoming(pad, now, "bad-transfer", format!("{} arrived incomplete", t.name));
                }
                self.events.push(ControlEvent::TransferProgress {
                    session: pad,
                    direction: TransferDirection::In,
                    kind: TransferKind::File,
                    name: t.name.clone(),
                    done: t.done,
                    total: t.total,
                    finished: true,
                    elapsed_ms: None,
                });
                self.status(Some(pad), format!("received {} ({} bytes)", path.display(), t.done));
            }
            (Some(DistItem::Manifest { pad: new_pad }), Sink::Secret(buf)) => {
                match serde_json::from_slice::<DistributionManifest>(buf.as_slice()) {
                    Ok(m) if m.pad_id == new_pad && m.metadata().validate(0).is_ok() => {
                        self.assemblies.entry(new_pad).or_default().manifest = Some(m);
                    }
                    _ => self.reject_incoming(pad, now, "distribution-refused", "bad manifest".into()),
                }
            }
            (Some(DistItem::Page { pad: new_pad, page }), Sink::Secret(buf)) => {
                let Some(asm) = self.assemblies.get_mut(&new_pad) else { return };
                asm.add_page(page, buf);
                if let Some((m, pages)) = asm.take_complete() {
                    self.assemblies.remove(&new_pad);
                    self.install_distributed(m, pages, now);
                }
            }
            _ => {}
        }
    }

    fn install_distributed(&mut self, m: DistributionManifest, pages: Vec<SecretBuf>, now: Duration) {
        let _ = now;
        match self.vault.install_pad(m.metadata(), &pages) {
            Ok(()) => {
                self.sessions.insert(Session::new(m.pad_id, m.peer, Some(m.role), self.config.timers));
                self.status(
                    Some(m.pad_id),
                    format!("installed pad {:05} ({} pages); peer {}", m.pad_id, m.pages, fmt_peer(m.peer)),
                );
                self.push_session_list();
            }
            Err(e) => self.events.push(ControlEvent::Error {
                session: None,
                code: "install-failed".into(),
                message: e.to_string(),
            }),
        }
    }

    /// The one orderly way out: write pages back, save sessions, release the lock.
    pub fn shutdown(mut self) -> Result<ShutdownReport, AppError> {
        let pads: Vec<u32> = self.incoming.keys().copied().collect();
        for pad in pads {
            self.drop_incoming(pad, "interrupted by shutdown");
        }
        let snaps = self.sessions.snapshot();
        let report = ShutdownReport { sessions: snaps.len(), pending: snaps.iter().filter(|s| s.pending.is_some()).count() };
        let bytes = encode_sessions(&snaps, &[]);
        self.vault.persist_on_shutdown(Some(&bytes))?;
        SHUTDOWNS.fetch_add(1, Ordering::SeqCst);
        Ok(report)
    }

    /// Stop without any cleanup, as a crash would. The lock stays behind.
    pub fn crash(self) {
        drop(self);
    }
}

fn fmt_peer(p: Option<Endpoint>) -> String {
    p.map(|e| e.to_string()).unwrap_or_else(|| "unknown".into())
}

fn chunked(ptype: PacketType, bytes: &[u8], id: u64) -> (Vec<Queued>, VecDeque<u64>) {
    let mut items = Vec::new();
    let mut sizes = VecDeque::new();
    let mut at = 0;
    for len in chunk_lengths(bytes.len(), MAX_PAYLOAD) {
        items.push(Queued::new(ptype, bytes[at..at + len].to_vec()).in_transfer(id));
        sizes.push_back(len as u64);
        at += len;
    }
    (items, sizes)
}

/// Begin, data and end packets for one file. Sizes count file bytes only.
fn file_items(name: &str, data: &[u8], id: u64) -> (Vec<Queued>, VecDeque<u64>) {
    let mut begin = (data.len() as u64).to_be_bytes().to_vec();
    let room = MAX_PAYLOAD - 8;
    let mut cut = name.len().min(room);
    while !name.is_char_boundary(cut) {
        cut -= 1;
    }
    begin.extend_from_slice(&name.as_bytes()[..cut]);
    let mut items = vec![Queued::new(PacketType::FileBegin, begin).in_transfer(id)];
    let mut sizes = VecDeque::from([0]);
    let (data_items, data_sizes) = chunked(PacketType::FileData, data, id);
    items.extend(data_items);
    sizes.extend(data_sizes);
    items.push(Queued::new(PacketType::FileEnd, Vec::new()).in_transfer(id));
    sizes.push_back(0);
    (items, sizes)
}

/// Keep only the final path component, without control characters.
pub fn sanitize_name(name: &str) -> String {
    let last = name.rsplit(['/', '\\']).next().unwrap_or("");
    let clean: String = last.chars().filter(|c| !c.is_control()).collect();
    match clean.as_str() {
        "" | "." | ".." => "unnamed".into(),
        _ => clean,
    }
}

/// Create `dir/name`, or `dir/name.1`, `dir/name.2`, ... if taken.
pub fn create_unique(dir: &Path, name: &str) -> io::Result<(PathBuf, fs::File)> {
    for n in 0u32.. {
        let candidate = if n == 0 { dir.join(name) } else { dir.join(format!("{name}.{n}")) };
        match fs::OpenOptions::new().write(true).create_new(true).open(&candidate) {
            Ok(f) => return Ok((candidate, f)),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
    unreachable!("u32 suffixes exhausted")
}

/// `/v` output: the metadata table plus a column saying who turns pages.
pub fn vault_report_text(rows: &[VaultRow]) -> String {
    let metas: Vec<_> = rows.iter().map(|r| r.meta).collect();
    let table = crate::vault::serialize_metadata(&metas).unwrap_or_default();
    let mut out = String::new();
    for (i, line) in table.lines().enumerate() {
        out.push_str(line);
        if i == 0 {
            out.push_str("  ctl");
        } else {
            out.push_str(if rows[i - 1].controls_page_turns { "  yes" } else { "   no" });
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_sanitized() {
        assert_eq!(sanitize_name("../../etc/passwd"), "passwd");
        assert_eq!(sanitize_name("a\\b.txt"), "b.txt");
        assert_eq!(sanitize_name(".."), "unnamed");
        assert_eq!(sanitize_name("x\u{7}y"), "xy");
    }

    #[test]
    fn collisions_get_suffixes() {
        let dir = tempfile::tempdir().unwrap();
        let (a, _) = create_unique(dir.path(), "f.txt").unwrap();
        let (b, _) = create_unique(dir.path(), "f.txt").unwrap();
        let (c, _) = create_unique(dir.path(), "f.txt").unwrap();
        assert_eq!(a.file_name().unwrap(), "f.txt");
        assert_eq!(b.file_name().unwrap(), "f.txt.1");
        assert_eq!(c.file_name().unwrap(), "f.txt.2");
    }

    #[test]
    fn file_items_shape() {
        let (items, sizes) = file_items("x.bin", &vec![7u8; 3000], 4);
        let types: Vec<_> = items.iter().map(|q| q.ptype).collect();
        assert_eq!(types.first(), Some(&PacketType::FileBegin));
        assert_eq!(types.last(), Some(&PacketType::FileEnd));
        assert_eq!(sizes.iter().sum::<u64>(), 3000);
        assert!(items.iter().all(|q| q.transfer == Some(4) && q.payload.len() <= MAX_PAYLOAD));
        assert_eq!(&items[0].payload[..8], &3000u64.to_be_bytes());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(AppError::VaultLocked("v".into()).exit_code(), 2);
        assert_eq!(AppError::Config(ConfigError::MissingRequired("User")).exit_code(), 3);
        assert_eq!(AppError::from(VaultError::VaultLocked("x".into())).exit_code(), 2);
    }
}
