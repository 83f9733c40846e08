//! Jamming experiments: a victim node receiving a bulk transfer while a
//! hostile sender sprays junk datagrams at it, under a finite CPU budget.

use std::time::Duration;

use serde::Serialize;

use crate::app::{Config, ControlEvent, NodeOptions, TransferDirection};
use crate::harness::{provision, CpuModel, Jammer, World};
use crate::session::RESYNC_WINDOW;
use crate::transport::{Endpoint, LinkModel};
use crate::vault::{ConsumeKind, Direction, MemStore, PadPlan, Role};

const VICTIM: u32 = 1;
const SENDER: u32 = 2;
const JAMMER: u32 = 99;

/// Victim budget in HMAC evaluations per virtual second: 66 Hz of 16-byte
/// junk against two pads uses 66% of it.
pub const DEFAULT_BUDGET: f64 = 300_200.0;

/// Frequencies for the standard sweep.
pub const DEFAULT_FREQS: [f64; 6] = [0.0, 20.0, 40.0, 66.0, 100.0, 130.0];

/// HMAC evaluations a victim spends on one datagram that matches nothing,
/// when every pad has a full resync window ahead of its cursor.
pub fn hostile_cost(pads: u64) -> u64 {
    pads * (1 + RESYNC_WINDOW as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JamProfile {
    pub len: usize,
    pub hz: f64,
    pub zeros: bool,
    pub seed: u64,
}

impl JamProfile {
    pub fn random(len: usize, hz: f64) -> Self {
        JamProfile { len, hz, zeros: false, seed: 23 }
    }

    pub fn bit_rate(&self) -> f64 {
        self.len as f64 * 8.0 * self.hz
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VictimConfig {
    /// Pads the victim holds; only the first carries traffic.
    pub pads: u32,
    pub kb_per_page: u32,
    pub pages: u32,
    pub transfer_bytes: u64,
    pub queue_cap: usize,
    /// Give up after this much virtual time.
    pub limit: Duration,
}

impl Default for VictimConfig {
    fn default() -> Self {
        VictimConfig {
            pads: 2,
            kb_per_page: 512,
            pages: 4,
            transfer_bytes: 100_000,
            queue_cap: 22,
            limit: Duration::from_secs(600),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JamReport {
    pub jam_hz: f64,
    pub jam_len: usize,
    pub jam_bit_rate: f64,
    pub evals_per_sec: f64,
    pub cpu_fraction: f64,
    pub goodput_kbps: f64,
    /// `None` if the transfer did not finish within the limit.
    pub tx_time: Option<f64>,
    pub dropped: u64,
    pub jam_sent: u64,
    pub retransmissions: u64,
    /// Key bytes the victim used for packets the sender never sent.
    pub false_accepts: u64,
    pub delivered_once: bool,
}

/// One transfer under one jamming profile.
pub fn run_jam_experiment(link: LinkModel, victim: &VictimConfig, profile: &JamProfile, cpu_budget: f64) -> JamReport {
    let mut hub = MemStore::new("victim");
    let mut peer = MemStore::new("sender");
    let mut idle = MemStore::new("idle");
    let plan = |pad| [PadPlan { pad_id: pad, kb_per_page: victim.kb_per_page, pages: victim.pages, reserve: false }];
    provision(&plan(1), &mut [(&mut hub, Role::A), (&mut peer, Role::B)], 1).expect("fresh stores");
    for pad in 2..=victim.pads.max(1) {
        provision(&plan(pad), &mut [(&mut hub, Role::A), (&mut idle, Role::B)], pad as u64).expect("fresh stores");
    }

    let mut w = World::new(link);
    w.add_node(VICTIM, Config::server("victim"), hub, None, NodeOptions::default()).expect("victim starts");
    w.add_node(SENDER, Config::client(1, "sender"), peer, Some(VICTIM), NodeOptions::default()).expect("sender starts");
    w.set_cpu(VICTIM, CpuModel { queue_cap: victim.queue_cap, ..CpuModel::budget(cpu_budget) });
    w.command(SENDER, "/c").expect("connect");
    let t0 = w.now() + Duration::from_secs(1);
    w.run_until(t0);

    if profile.hz > 0.0 {
        w.add_jammer(Jammer {
            from: Endpoint::Sim(JAMMER),
            to: Endpoint::Sim(VICTIM),
            len: profile.len,
            hz: profile.hz,
            zeros: profile.zeros,
            poisson: true,
            start: t0,
            until: t0 + victim.limit,
            seed: profile.seed,
        });
    }
    let before = w.stats(VICTIM);
    let retx_before = sender_retransmissions(&w);
    w.command(SENDER, &format!("/g{}", victim.transfer_bytes)).expect("transfer starts");
    let tx_time = w.await_transfer(SENDER, t0 + victim.limit);
    let elapsed = (w.now() - t0).as_secs_f64().max(1e-9);
    let after = w.stats(VICTIM);

    let acked: u64 = w
        .events(SENDER)
        .iter()
        .filter_map(|e| match e {
            ControlEvent::TransferProgress { direction: TransferDirection::Out, done, .. } => Some(*done),
            _ => None,
        })
        .max()
        .unwrap_or(0);
    let goodput_kbps = match tx_time {
        Some(t) => victim.transfer_bytes as f64 * 8.0 / t.as_secs_f64() / 1000.0,
        None => acked as f64 * 8.0 / elapsed / 1000.0,
    };

    let used = |node: u32, pad: u32, dir: Direction| {
        let label = format!("node{node}");
        w.consume_log()
            .iter()
            .filter(|r| r.vault == label && r.pad == pad && r.dir == dir && r.kind == ConsumeKind::Used)
            .map(|r| r.len as u64)
            .sum::<u64>()
    };
    let sent = used(SENDER, 1, Direction::Tx);
    let accepted = used(VICTIM, 1, Direction::Rx);
    let stray: u64 = (2..=victim.pads).map(|p| used(VICTIM, p, Direction::Rx)).sum();

    JamReport {
        jam_hz: profile.hz,
        jam_len: profile.len,
        jam_bit_rate: profile.bit_rate(),
        evals_per_sec: (after.hmac_evals - before.hmac_evals) as f64 / elapsed,
        cpu_fraction: (after.busy - before.busy).as_secs_f64() / elapsed,
        goodput_kbps,
        tx_time: tx_time.map(|t| t.as_secs_f64()),
        dropped: after.dropped - before.dropped,
        jam_sent: w.jam_sent(),
        retransmissions: sender_retransmissions(&w) - retx_before,
        false_accepts: accepted.saturating_sub(sent) + stray,
        delivered_once: tx_time.is_some() && accepted == sent,
    }
}

fn sender_retransmissions(w: &World) -> u64 {
    w.node(SENDER)
        .and_then(|n| n.sessions().get(1))
        .map(|s| s.stats.retransmitted)
        .unwrap_or(0)
}

/// One experiment per frequency, same packet length.
pub fn sweep(link: LinkModel, victim: &VictimConfig, len: usize, freqs: &[f64], cpu_budget: f64) -> Vec<JamReport> {
    freqs
        .iter()
        .map(|&hz| run_jam_experiment(link.clone(), victim, &JamProfile::random(len, hz), cpu_budget))
        .collect()
}

/// Budget at which `hz` jam packets of cost [`hostile_cost`] use `fraction` of the CPU.
pub fn calibrate_budget(pads: u64, hz: f64, fraction: f64) -> f64 {
    hostile_cost(pads) as f64 * hz / fraction
}

/// Aligned text table, one row per report.
pub fn render_table(rows: &[JamReport]) -> String {
    let mut s = format!(
        "{:>10} {:>12} {:>9} {:>12} {:>14} {:>12} {:>8}\n",
        "jam Hz", "jam bit/s", "CPU use", "evals/s", "100 kB tx time", "throughput", "drops"
    );
    for r in rows {
        let tx = match r.tx_time {
            Some(t) => format!("{t:.1} s"),
            None => "unfinished".into(),
        };
        s.push_str(&format!(
            "{:>10} {:>12} {:>8.0}% {:>12.0} {:>14} {:>7.1} kbit/s {:>8}\n",
            if r.jam_hz == 0.0 { "none".to_string() } else { format!("{:.0}", r.jam_hz) },
            format!("{:.1}k", r.jam_bit_rate / 1000.0),
            r.cpu_fraction * 100.0,
            r.evals_per_sec,
            tx,
            r.goodput_kbps,
            r.dropped
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_formula() {
        assert_eq!(hostile_cost(2), 3002);
        assert!((calibrate_budget(2, 390.0, 0.66) - 1_773_909.09).abs() < 1.0);
        assert!((calibrate_budget(2, 66.0, 0.66) - DEFAULT_BUDGET).abs() < 1e-6);
    }

    #[test]
    fn baseline_is_stop_and_wait() {
        let link = LinkModel::fixed(Duration::from_millis(15));
        let victim = VictimConfig::default();
        let r = run_jam_experiment(link, &victim, &JamProfile::random(16, 0.0), 300_000.0);
        // 71 packets at one 30 ms round trip each.
        assert_eq!(r.tx_time, Some(71.0 * 0.030));
        assert_eq!(r.false_accepts, 0);
        assert!(r.delivered_once);
    }
}
