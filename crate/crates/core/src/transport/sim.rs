//! Deterministic in-process network.
//!
//! Every directed link has its own [`LinkModel`] and its own seeded
//! generator, so the delivery schedule is a pure function of the models, the
//! seeds and the offered traffic. Deliveries at the same instant come out in
//! send order.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_size, Endpoint, TransportError};

/// Behavior of one direction of a link.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkModel {
    pub latency: Duration,
    /// Extra delay drawn uniformly from `0..=jitter`.
    pub jitter: Duration,
    pub drop: f64,
    /// Probability a datagram is held back by up to one extra latency.
    pub reorder: f64,
    /// Serialization rate; `None` is unlimited.
    pub bandwidth_bps: Option<u64>,
    pub seed: u64,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            latency: Duration::from_millis(20),
            jitter: Duration::ZERO,
            drop: 0.0,
            reorder: 0.0,
            bandwidth_bps: None,
            seed: 0,
        }
    }
}

impl LinkModel {
    pub fn fixed(latency: Duration) -> Self {
        LinkModel { latency, ..Default::default() }
    }

    pub fn with_drop(mut self, p: f64) -> Self {
        self.drop = p;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_bandwidth(mut self, bps: u64) -> Self {
        self.bandwidth_bps = Some(bps);
        self
    }
}

#[derive(Debug)]
struct LinkState {
    model: LinkModel,
    rng: ChaCha8Rng,
    busy_until: Duration,
}

/// A datagram arriving somewhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub at: Duration,
    pub from: Endpoint,
    pub to: Endpoint,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFate {
    Delivered(Duration),
    Dropped,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub sent_at: Duration,
    pub from: Endpoint,
    pub to: Endpoint,
    pub len: usize,
    pub fate: TraceFate,
    pub bytes: Vec<u8>,
}

/// The simulated network. Time is supplied by the caller.
#[derive(Debug, Default)]
pub struct SimNet {
    default_link: LinkModel,
    links: HashMap<(Endpoint, Endpoint), LinkState>,
    queue: BinaryHeap<Reverse<(Duration, u64)>>,
    in_flight: HashMap<u64, Delivery>,
    seq: u64,
    trace: Option<Vec<TraceEntry>>,
}

fn link_seed(base: u64, from: Endpoint, to: Endpoint) -> u64 {
    let tag = |e: Endpoint| match e {
        Endpoint::Sim(n) => n as u64,
        Endpoint::Net(a) => u32::from(*a.ip()) as u64 ^ ((a.port() as u64) << 32),
    };
    base ^ tag(from).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ tag(to).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

impl SimNet {
    pub fn new(default_link: LinkModel) -> Self {
        SimNet {
            default_link,
            ..Default::default()
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    /// Set the model for `from -> to` only.
    pub fn set_link(&mut self, from: Endpoint, to: Endpoint, model: LinkModel) {
        let rng = ChaCha8Rng::seed_from_u64(link_seed(model.seed, from, to));
        self.links.insert((from, to), LinkState { model, rng, busy_until: Duration::ZERO });
    }

    /// Set the model for both directions between `a` and `b`.
    pub fn set_duplex(&mut self, a: Endpoint, b: Endpoint, model: LinkModel) {
        self.set_link(a, b, model.clone());
        self.set_link(b, a, model);
    }

    fn link(&mut self, from: Endpoint, to: Endpoint) -> &mut LinkState {
        let default = &self.default_link;
        self.links.entry((from, to)).or_insert_with(|| LinkState {
            model: default.clone(),
            rng: ChaCha8Rng::seed_from_u64(link_seed(default.seed, from, to)),
            busy_until: Duration::ZERO,
        })
    }

    /// Offer a datagram to the network at time `now`.
    pub fn send(&mut self, now: Duration, from: Endpoint, to: Endpoint, bytes: &[u8]) -> Result<(), TransportError> {
        check_size(bytes)?;
        self.send_unchecked(now, from, to, bytes.to_vec());
        Ok(())
    }

    /// Like [`send`](Self::send) without the size limit, for hostile traffic.
    pub fn send_unchecked(&mut self, now: Duration, from: Endpoint, to: Endpoint, bytes: Vec<u8>) {
        let len = bytes.len();
        let copy = if self.trace.is_some() { bytes.clone() } else { Vec::new() };
        let link = self.link(from, to);
        let m = &link.model;
        let dropped = m.drop > 0.0 && link.rng.gen::<f64>() < m.drop;
        let fate = if dropped {
            TraceFate::Dropped
        } else {
            let mut depart = now;
            if let Some(bps) = m.bandwidth_bps {
                let start = depart.max(link.busy_until);
                let wire = Duration::from_secs_f64(len as f64 * 8.0 / bps as f64);
                link.busy_until = start + wire;
                depart = start + wire;
            }
            let mut at = depart + m.latency;
            if !m.jitter.is_zero() {
                at += Duration::from_nanos(link.rng.gen_range(0..=m.jitter.as_nanos() as u64));
            }
            if m.reorder > 0.0 && link.rng.gen::<f64>() < m.reorder {
                at += Duration::from_nanos(link.rng.gen_range(0..=m.latency.as_nanos() as u64));
            }
            let seq = self.seq;
            self.seq += 1;
            self.queue.push(Reverse((at, seq)));
            self.in_flight.insert(seq, Delivery { at, from, to, bytes });
            TraceFate::Delivered(at)
        };
        if let Some(t) = self.trace.as_mut() {
            t.push(TraceEntry { sent_at: now, from, to, len, fate, bytes: copy });
        }
    }

    /// When the next datagram arrives, if any are in flight.
    pub fn next_delivery_time(&self) -> Option<Duration> {
        self.queue.peek().map(|Reverse((t, _))| *t)
    }

    /// Pop the earliest delivery due at or before `now`.
    pub fn pop_due(&mut self, now: Duration) -> Option<Delivery> {
        match self.queue.peek() {
            Some(Reverse((t, _))) if *t <= now => {
                let Reverse((_, seq)) = self.queue.pop().expect("peeked");
                self.in_flight.remove(&seq)
            }
            _ => None,
        }
    }

    /// Discard everything in flight to `to` (a node going down).
    pub fn drop_in_flight_to(&mut self, to: Endpoint) {
        self.in_flight.retain(|_, d| d.to != to);
        let live = &self.in_flight;
        self.queue.retain(|Reverse((_, s))| live.contains_key(s));
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    pub fn trace(&self) -> &[TraceEntry] {
        self.trace.as_deref().unwrap_or(&[])
    }
}

/// Monotonic virtual time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VirtualClock {
    now: Duration,
}

impl VirtualClock {
    pub fn now(&self) -> Duration {
        self.now
    }

    pub fn advance(&mut self, by: Duration) -> Duration {
        self.now += by;
        self.now
    }

    /// Move forward to `t`; earlier times leave the clock unchanged.
    pub fn advance_to(&mut self, t: Duration) -> Duration {
        self.now = self.now.max(t);
        self.now
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    const A: Endpoint = Endpoint::Sim(1);
    const B: Endpoint = Endpoint::Sim(2);

    fn drain(net: &mut SimNet) -> Vec<Delivery> {
        let mut out = Vec::new();
        while let Some(t) = net.next_delivery_time() {
            out.push(net.pop_due(t).unwrap());
        }
        out
    }

    #[test]
    fn fixed_latency_delivery() {
        let mut net = SimNet::new(LinkModel::fixed(Duration::from_millis(20)));
        net.send(Duration::ZERO, A, B, b"x").unwrap();
        assert!(net.pop_due(Duration::from_millis(19)).is_none());
        let d = net.pop_due(Duration::from_millis(20)).unwrap();
        assert_eq!((d.at, d.from, d.to), (Duration::from_millis(20), A, B));
    }

    #[test]
    fn same_seed_same_schedule() {
        let model = LinkModel {
            jitter: Duration::from_millis(5),
            drop: 0.3,
            reorder: 0.2,
            seed: 99,
            ..Default::default()
        };
        let run = || {
            let mut net = SimNet::new(model.clone()).with_trace();
            for i in 0..200u64 {
                net.send(Duration::from_millis(i), A, B, &i.to_be_bytes()).unwrap();
            }
            drain(&mut net);
            net.trace().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn full_drop_delivers_nothing_and_nothing_duplicates() {
        let mut net = SimNet::new(LinkModel::default().with_drop(1.0));
        for _ in 0..50 {
            net.send(Duration::ZERO, A, B, b"x").unwrap();
        }
        assert!(drain(&mut net).is_empty());
        let mut net = SimNet::new(LinkModel { reorder: 0.5, jitter: Duration::from_millis(3), ..Default::default() });
        for i in 0..100u32 {
            net.send(Duration::ZERO, A, B, &i.to_be_bytes()).unwrap();
        }
        let mut got: Vec<u32> = drain(&mut net)
            .into_iter()
            .map(|d| u32::from_be_bytes(d.bytes.try_into().unwrap()))
            .collect();
        got.sort();
        assert_eq!(got, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn bandwidth_cap_serializes() {
        let mut net = SimNet::new(LinkModel::fixed(Duration::ZERO).with_bandwidth(8_000));
        net.send(Duration::ZERO, A, B, &[0; 1000]).unwrap();
        net.send(Duration::ZERO, A, B, &[0; 1000]).unwrap();
        let d = drain(&mut net);
        assert_eq!(d[0].at, Duration::from_secs(1));
        assert_eq!(d[1].at, Duration::from_secs(2));
    }

    #[test]
    fn oversize_refused() {
        let mut net = SimNet::default();
        assert!(matches!(
            net.send(Duration::ZERO, A, B, &[0; 1433]),
            Err(TransportError::OversizeDatagram(1433))
        ));
    }

    #[test]
    fn clock_is_monotonic() {
        let mut c = VirtualClock::default();
        c.advance(Duration::from_millis(300));
        c.advance_to(Duration::from_millis(100));
        assert_eq!(c.now(), Duration::from_millis(300));
    }
}
