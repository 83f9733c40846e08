//! Deterministic lab: whole nodes on a simulated network with a virtual
//! clock, an optional per-node CPU budget, crash/restart and hostile senders.

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::app::{Action, AppError, CommandError, Config, ControlEvent, Node, NodeOptions};
use crate::hygiene::Scrubber;
use crate::transport::{Endpoint, LinkModel, SimNet, VirtualClock};
use crate::vault::{
    install_entropy, recover_pad, ConsumeRecord, Destination, InstallError, MemSource, MemStore, PadMetadata, PadPlan,
    PageStore, Role, VaultError,
};

/// Fill `stores` with identical pads from a seeded source. Each store takes
/// the paired role.
pub fn provision(plan: &[PadPlan], dests: &mut [(&mut MemStore, Role)], seed: u64) -> Result<(), InstallError> {
    let need: u64 = plan.iter().map(PadPlan::bytes).sum();
    let mut bytes = vec![0u8; need as usize];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut bytes);
    let mut src = MemSource(bytes);
    let mut d: Vec<Destination<'_>> =
        dests.iter_mut().map(|(s, role)| Destination { store: &mut **s as &mut dyn PageStore, role: *role }).collect();
    install_entropy(&mut src, 0, plan, &mut d, &mut Scrubber::seeded(seed ^ 0x5eed))?;
    Ok(())
}

/// Receive-side processing cost. The default is free and instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpuModel {
    /// HMAC evaluations per virtual second; `None` means unlimited.
    pub evals_per_sec: Option<f64>,
    /// Fixed cost per received datagram.
    pub per_datagram: Duration,
    /// Datagrams that may wait while the node is busy; more are dropped.
    pub queue_cap: usize,
}

impl Default for CpuModel {
    fn default() -> Self {
        CpuModel { evals_per_sec: None, per_datagram: Duration::ZERO, queue_cap: 128 }
    }
}

impl CpuModel {
    pub fn budget(evals_per_sec: f64) -> Self {
        CpuModel { evals_per_sec: Some(evals_per_sec), ..Default::default() }
    }

    fn cost(&self, evals: u64) -> Duration {
        let work = match self.evals_per_sec {
            Some(r) if r > 0.0 => Duration::from_secs_f64(evals as f64 / r),
            _ => Duration::ZERO,
        };
        self.per_datagram + work
    }
}

/// Counters for one simulated node.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeStats {
    pub received: u64,
    pub processed: u64,
    pub dropped: u64,
    pub busy: Duration,
    pub hmac_evals: u64,
}

/// Sends junk datagrams at a fixed rate.
#[derive(Debug, Clone)]
pub struct Jammer {
    pub from: Endpoint,
    pub to: Endpoint,
    pub len: usize,
    pub hz: f64,
    pub zeros: bool,
    /// Exponential gaps with mean `1/hz` instead of a fixed period.
    pub poisson: bool,
    pub start: Duration,
    pub until: Duration,
    pub seed: u64,
}

struct JamState {
    spec: Jammer,
    rng: ChaCha8Rng,
    next: Duration,
    sent: u64,
}

struct SimNode {
    config: Config,
    opts: NodeOptions,
    store: MemStore,
    server: Option<Endpoint>,
    node: Option<Node>,
    cpu: CpuModel,
    busy_until: Duration,
    queue: VecDeque<(Vec<u8>, Endpoint)>,
    held: Vec<(Duration, Endpoint, Vec<u8>)>,
    stats: NodeStats,
    events: Vec<ControlEvent>,
}

/// The simulated world.
pub struct World {
    pub net: SimNet,
    clock: VirtualClock,
    nodes: BTreeMap<u32, SimNode>,
    jammers: Vec<JamState>,
    consumed: Vec<ConsumeRecord>,
}

impl std::fmt::Debug for World {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("World").field("now", &self.clock.now()).field("nodes", &self.nodes.len()).finish()
    }
}

/// A node added with [`World::add_node`].
#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("no node {0}")]
    NoNode(u32),
    #[error("node {0} is not running")]
    NotRunning(u32),
    #[error("node {0} is already running")]
    AlreadyRunning(u32),
    #[error(transparent)]
    App(#[from] AppError),
    #[error(transparent)]
    Command(#[from] CommandError),
    #[error(transparent)]
    Vault(#[from] VaultError),
}

impl World {
    pub fn new(link: LinkModel) -> Self {
        World {
            net: SimNet::new(link),
            clock: VirtualClock::default(),
            nodes: BTreeMap::new(),
            jammers: Vec::new(),
            consumed: Vec::new(),
        }
    }

    pub fn now(&self) -> Duration {
        self.clock.now()
    }

    /// Start a node on `Endpoint::Sim(id)` over `store`. Clients name their hub
    /// with `server`.
    pub fn add_node(
        &mut self,
        id: u32,
        config: Config,
        store: MemStore,
        server: Option<u32>,
        mut opts: NodeOptions,
    ) -> Result<(), WorldError> {
        if opts.label.is_empty() {
            opts.label = format!("node{id}");
        }
        opts.log_consumption = true;
        if opts.gibberish_seed.is_none() {
            opts.gibberish_seed = Some(id as u64);
        }
        if opts.scrub_seed.is_none() {
            opts.scrub_seed = Some(0xabc0 + id as u64);
        }
        self.nodes.insert(
            id,
            SimNode {
                config,
                opts,
                store,
                server: server.map(Endpoint::Sim),
                node: None,
                cpu: CpuModel::default(),
                busy_until: Duration::ZERO,
                queue: VecDeque::new(),
                held: Vec::new(),
                stats: NodeStats::default(),
                events: Vec::new(),
            },
        );
        self.start(id)
    }

    /// (Re)start a stopped node from its store.
    pub fn start(&mut self, id: u32) -> Result<(), WorldError> {
        let now = self.now();
        let n = self.nodes.get_mut(&id).ok_or(WorldError::NoNode(id))?;
        if n.node.is_some() {
            return Err(WorldError::AlreadyRunning(id));
        }
        let node = Node::start(n.config.clone(), Box::new(n.store.clone()), n.server, n.opts.clone(), now)?;
        n.node = Some(node);
        n.busy_until = now;
        self.flush(id);
        Ok(())
    }

    pub fn set_cpu(&mut self, id: u32, cpu: CpuModel) {
        if let Some(n) = self.nodes.get_mut(&id) {
            n.cpu = cpu;
        }
    }

    pub fn set_duplex(&mut self, a: u32, b: u32, link: LinkModel) {
        self.net.set_duplex(Endpoint::Sim(a), Endpoint::Sim(b), link);
    }

    pub fn add_jammer(&mut self, spec: Jammer) {
        let rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let next = spec.start;
        self.jammers.push(JamState { spec, rng, next, sent: 0 });
    }

    pub fn jam_sent(&self) -> u64 {
        self.jammers.iter().map(|j| j.sent).sum()
    }

    pub fn store(&self, id: u32) -> Option<&MemStore> {
        self.nodes.get(&id).map(|n| &n.store)
    }

    pub fn is_running(&self, id: u32) -> bool {
        self.nodes.get(&id).is_some_and(|n| n.node.is_some())
    }

    pub fn node(&self, id: u32) -> Option<&Node> {
        self.nodes.get(&id).and_then(|n| n.node.as_ref())
    }

    pub fn node_mut(&mut self, id: u32) -> Option<&mut Node> {
        self.nodes.get_mut(&id).and_then(|n| n.node.as_mut())
    }

    pub fn stats(&self, id: u32) -> NodeStats {
        self.nodes.get(&id).map(|n| n.stats).unwrap_or_default()
    }

    /// Every control event the node has produced, across restarts.
    pub fn events(&self, id: u32) -> &[ControlEvent] {
        self.nodes.get(&id).map(|n| n.events.as_slice()).unwrap_or(&[])
    }

    pub fn clear_events(&mut self, id: u32) {
        if let Some(n) = self.nodes.get_mut(&id) {
            n.events.clear();
        }
    }

    /// Every key interval any vault has given up so far.
    pub fn consume_log(&self) -> &[ConsumeRecord] {
        &self.consumed
    }

    /// Type a line at node `id`. `/Z` crashes it.
    pub fn command(&mut self, id: u32, line: &str) -> Result<(), WorldError> {
        let now = self.now();
        let node = self.node_mut(id).ok_or(WorldError::NotRunning(id))?;
        let res = node.handle_line(line, now);
        self.flush(id);
        if res? == Action::Crash {
            self.crash(id)?;
        }
        Ok(())
    }

    /// Drop the node without any cleanup; its lock stays behind.
    pub fn crash(&mut self, id: u32) -> Result<(), WorldError> {
        self.harvest(id);
        let n = self.nodes.get_mut(&id).ok_or(WorldError::NoNode(id))?;
        let node = n.node.take().ok_or(WorldError::NotRunning(id))?;
        node.crash();
        n.queue.clear();
        n.held.clear();
        self.net.drop_in_flight_to(Endpoint::Sim(id));
        Ok(())
    }

    /// Orderly stop: pages and sessions are saved and the lock released.
    pub fn shutdown(&mut self, id: u32) -> Result<(), WorldError> {
        self.harvest(id);
        let n = self.nodes.get_mut(&id).ok_or(WorldError::NoNode(id))?;
        let node = n.node.take().ok_or(WorldError::NotRunning(id))?;
        n.queue.clear();
        n.held.clear();
        node.shutdown()?;
        Ok(())
    }

    /// Manual recovery of `pad` between stopped nodes `x` and `y`: both move to
    /// pages neither has touched, mirrored, and their locks are cleared.
    pub fn recover_link(&mut self, x: u32, y: u32, pad: u32) -> Result<(PadMetadata, PadMetadata), WorldError> {
        for id in [x, y] {
            if self.is_running(id) {
                return Err(WorldError::AlreadyRunning(id));
            }
        }
        let mut highest = 0;
        for id in [x, y] {
            let store = &self.nodes[&id].store;
            let text = store.metadata_text().ok_or(VaultError::UnknownPad(pad))?;
            let rows = crate::vault::parse_metadata(&text).map_err(VaultError::from)?;
            let m = rows.iter().find(|r| r.pad_id == pad).ok_or(VaultError::UnknownPad(pad))?;
            highest = highest.max(m.tx_pg.min(m.pages)).max(m.rx_pg.min(m.pages));
        }
        let next = highest + 1;
        let mut scrub = Scrubber::seeded(0xdead ^ pad as u64);
        let mut sx = self.nodes[&x].store.clone();
        let mut sy = self.nodes[&y].store.clone();
        let mx = recover_pad(&mut sx, pad, next, next + 1, &mut scrub)?;
        let my = recover_pad(&mut sy, pad, next + 1, next, &mut scrub)?;
        Ok((mx, my))
    }

    fn harvest(&mut self, id: u32) {
        if let Some(n) = self.nodes.get_mut(&id) {
            if let Some(node) = n.node.as_mut() {
                self.consumed.extend(node.take_consume_log());
                n.events.extend(node.take_events());
                n.stats.hmac_evals = node.hmac_evals();
            }
        }
    }

    /// Move a node's outgoing datagrams onto the network (or hold them while
    /// it is busy) and collect its events.
    fn flush(&mut self, id: u32) {
        let now = self.now();
        let Some(n) = self.nodes.get_mut(&id) else { return };
        let Some(node) = n.node.as_mut() else { return };
        let release = n.busy_until.max(now);
        for (to, bytes) in node.take_sends() {
            if release > now {
                n.held.push((release, to, bytes));
            } else if let Err(e) = self.net.send(now, Endpoint::Sim(id), to, &bytes) {
                log::warn!("node {id}: {e}");
            }
        }
        self.consumed.extend(node.take_consume_log());
        n.events.extend(node.take_events());
        n.stats.hmac_evals = node.hmac_evals();
    }

    fn next_event(&self) -> Option<Duration> {
        let now = self.now();
        let mut t: Option<Duration> = self.net.next_delivery_time();
        let mut consider = |x: Duration| t = Some(t.map_or(x, |t| t.min(x)));
        for j in &self.jammers {
            if j.next < j.spec.until {
                consider(j.next);
            }
        }
        for n in self.nodes.values() {
            let Some(node) = n.node.as_ref() else { continue };
            for (at, _, _) in &n.held {
                consider(*at);
            }
            if n.busy_until > now {
                consider(n.busy_until);
            } else if !n.queue.is_empty() {
                consider(now);
            } else if let Some(d) = node.next_deadline() {
                consider(d.max(now));
            }
        }
        t
    }

    /// Advance to the next event no later than `limit`. False when idle.
    pub fn step(&mut self, limit: Duration) -> bool {
        let Some(t) = self.next_event().filter(|t| *t <= limit) else {
            self.clock.advance_to(limit.max(self.now()));
            return false;
        };
        self.clock.advance_to(t);
        let now = t;

        for (&id, n) in self.nodes.iter_mut() {
            let (due, later): (Vec<_>, Vec<_>) = n.held.drain(..).partition(|(at, _, _)| *at <= now);
            n.held = later;
            for (_, to, bytes) in due {
                if let Err(e) = self.net.send(now, Endpoint::Sim(id), to, &bytes) {
                    log::warn!("node {id}: {e}");
                }
            }
        }

        for j in &mut self.jammers {
            while j.next <= now && j.next < j.spec.until {
                let mut bytes = vec![0u8; j.spec.len];
                if !j.spec.zeros {
                    j.rng.fill(&mut bytes[..]);
                }
                self.net.send_unchecked(j.next, j.spec.from, j.spec.to, bytes);
                j.sent += 1;
                let gap = if j.spec.poisson {
                    -(1.0 - j.rng.gen::<f64>()).ln() / j.spec.hz
                } else {
                    1.0 / j.spec.hz
                };
                j.next += Duration::from_secs_f64(gap);
            }
        }

        while let Some(d) = self.net.pop_due(now) {
            let Endpoint::Sim(id) = d.to else { continue };
            let Some(n) = self.nodes.get_mut(&id) else { continue };
            if n.node.is_none() {
                continue;
            }
            n.stats.received += 1;
            if n.queue.len() >= n.cpu.queue_cap {
                n.stats.dropped += 1;
            } else {
                n.queue.push_back((d.bytes, d.from));
            }
        }

        let ids: Vec<u32> = self.nodes.keys().copied().collect();
        for id in ids {
            loop {
                let n = self.nodes.get_mut(&id).expect("listed");
                let Some(node) = n.node.as_mut() else { break };
                if n.busy_until > now {
                    break;
                }
                let Some((bytes, from)) = n.queue.pop_front() else { break };
                let before = node.hmac_evals();
                node.on_datagram(&bytes, from, now);
                let cost = n.cpu.cost(node.hmac_evals() - before);
                n.stats.processed += 1;
                n.stats.busy += cost;
                n.busy_until = now + cost;
                self.flush(id);
            }
            let n = self.nodes.get_mut(&id).expect("listed");
            if let Some(node) = n.node.as_mut() {
                if n.busy_until <= now && node.next_deadline().is_some_and(|d| d <= now) {
                    node.on_timer(now);
                    self.flush(id);
                }
            }
        }
        true
    }

    pub fn run_until(&mut self, t: Duration) {
        while self.step(t) {}
    }

    pub fn run_for(&mut self, d: Duration) {
        let t = self.now() + d;
        self.run_until(t);
    }

    /// Run until `done` holds or `limit` passes. Returns whether `done` held.
    pub fn run_until_cond(&mut self, limit: Duration, mut done: impl FnMut(&World) -> bool) -> bool {
        loop {
            if done(self) {
                return true;
            }
            if !self.step(limit) {
                return done(self);
            }
        }
    }

    /// Time from now until node `id` reports an outgoing transfer finished.
    pub fn await_transfer(&mut self, id: u32, limit: Duration) -> Option<Duration> {
        let start = self.events(id).len();
        let mut elapsed = None;
        self.run_until_cond(limit, |w| {
            elapsed = w.events(id)[start..].iter().find_map(|e| match e {
                ControlEvent::TransferProgress {
                    direction: crate::app::TransferDirection::Out,
                    finished: true,
                    elapsed_ms,
                    ..
                } => *elapsed_ms,
                _ => None,
            });
            elapsed.is_some()
        });
        elapsed.map(Duration::from_millis)
    }

    /// Shut down every running node cleanly.
    pub fn shutdown_all(&mut self) -> Result<(), WorldError> {
        let ids: Vec<u32> = self.nodes.keys().copied().collect();
        for id in ids {
            if self.is_running(id) {
                self.shutdown(id)?;
            }
        }
        Ok(())
    }
}
