#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use otpad_core::app::{Config, ControlEvent, NodeOptions};
use otpad_core::harness::{provision, World};
use otpad_core::hub::DistributionRecord;
use otpad_core::transport::{LinkModel, SimNet};
use otpad_core::vault::{ConsumeKind, ConsumeRecord, Direction, MemStore, PadPlan, Role};

pub const HUB: u32 = 100;

pub const METADATA_FIXTURE: &str = "\
pad   kb/pg pages tx pg rx pg tx off   rx off
00000 04096 00080 00000 00080 00000000 00000000
00001 00512 00256 00054 00053 00085898 00085114
00002 00512 00256 00022 00005 00113459 00000752
00003 00512 00256 00022 00005 00046155 00000425
00004 00512 00256 00022 00005 00046189 00000449
00005 00512 00256 00022 00005 00113496 00000412
";

pub struct Star {
    pub clients: u32,
    pub kb: u32,
    pub pages: u32,
    pub reserve_pages: u32,
    pub reserve_kb: u32,
    pub link: LinkModel,
    pub trace: bool,
    pub allow_crash: bool,
    pub rx_dir: Option<std::path::PathBuf>,
}

impl Default for Star {
    fn default() -> Self {
        Star {
            clients: 2,
            kb: 4,
            pages: 32,
            reserve_pages: 0,
            reserve_kb: 4,
            link: LinkModel::fixed(Duration::from_millis(20)),
            trace: false,
            allow_crash: false,
            rx_dir: None,
        }
    }
}

/// Hub on node 100, client `i` on node `i` sharing pad `i` with the hub.
pub fn star(s: &Star) -> World {
    let mut hub = MemStore::new("hub");
    let mut clients = Vec::new();
    if s.reserve_pages > 0 {
        let plan = [PadPlan { pad_id: 0, kb_per_page: s.reserve_kb, pages: s.reserve_pages, reserve: true }];
        provision(&plan, &mut [(&mut hub, Role::A)], 1000).unwrap();
    }
    for i in 1..=s.clients {
        let mut c = MemStore::new(&format!("client{i}"));
        let plan = [PadPlan { pad_id: i, kb_per_page: s.kb, pages: s.pages, reserve: false }];
        provision(&plan, &mut [(&mut hub, Role::A), (&mut c, Role::B)], i as u64).unwrap();
        clients.push(c);
    }
    let mut w = World::new(s.link.clone());
    if s.trace {
        w.net = SimNet::new(s.link.clone()).with_trace();
    }
    let opts = NodeOptions { allow_crash: s.allow_crash, audit_control: true, ..Default::default() };
    let mut hub_cfg = Config::server("hub");
    hub_cfg.rx_files_dir = s.rx_dir.as_ref().map(|d| d.join("hub"));
    w.add_node(HUB, hub_cfg, hub, None, opts.clone()).unwrap();
    for (i, c) in (1..=s.clients).zip(clients) {
        let mut cfg = Config::client(i, format!("client{i}"));
        cfg.rx_files_dir = s.rx_dir.as_ref().map(|d| d.join(format!("client{i}")));
        w.add_node(i, cfg, c, Some(HUB), opts.clone()).unwrap();
    }
    w
}

pub fn connect(w: &mut World, client: u32) {
    w.command(client, "/c").unwrap();
    let pad = client;
    let ok = w.run_until_cond(w.now() + Duration::from_secs(30), |w| {
        w.node(client).and_then(|n| n.sessions().get(pad)).is_some_and(|s| s.phase() == otpad_core::session::Phase::Connected)
            && w.node(HUB).and_then(|n| n.sessions().get(pad)).is_some_and(|s| s.phase() == otpad_core::session::Phase::Connected)
    });
    assert!(ok, "client {client} did not connect");
}

pub fn chats_in(w: &World, node: u32) -> Vec<String> {
    w.events(node)
        .iter()
        .filter_map(|e| match e {
            ControlEvent::ChatIn { text, .. } => Some(text.clone()),
            _ => None,
        })
        .collect()
}

pub fn errors(w: &World, node: u32) -> Vec<String> {
    w.events(node)
        .iter()
        .filter_map(|e| match e {
            ControlEvent::Error { code, message, .. } => Some(format!("{code}: {message}")),
            _ => None,
        })
        .collect()
}

pub fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

/// Which physical key bytes a record refers to: distributed pads are the
/// hub reserve pages they were carved from.
fn material(r: &ConsumeRecord, dists: &[DistributionRecord]) -> (u32, u32) {
    match dists.iter().find(|d| d.new_pad == r.pad) {
        Some(d) => (0, d.reserve_pages.start + r.page),
        None => (r.pad, r.page),
    }
}

#[derive(Debug)]
pub struct Overlap {
    pub first: ConsumeRecord,
    pub second: ConsumeRecord,
    pub scope: &'static str,
}

/// Interval oracle. Encryption uses of any key byte are unique across every
/// vault, and no vault gives up the same byte twice.
pub fn find_overlaps(log: &[ConsumeRecord], dists: &[DistributionRecord]) -> Vec<Overlap> {
    let mut out = Vec::new();
    let mut groups: BTreeMap<(String, u32, u32), Vec<&ConsumeRecord>> = BTreeMap::new();
    for r in log {
        let (pad, page) = material(r, dists);
        groups.entry((r.vault.clone(), pad, page)).or_default().push(r);
        if r.dir == Direction::Tx && r.kind == ConsumeKind::Used {
            groups.entry(("*tx".into(), pad, page)).or_default().push(r);
        }
    }
    for ((scope, _, _), mut rs) in groups {
        rs.sort_by_key(|r| (r.offset, r.len));
        for pair in rs.windows(2) {
            if pair[0].offset + pair[0].len as u64 > pair[1].offset {
                out.push(Overlap {
                    first: pair[0].clone(),
                    second: pair[1].clone(),
                    scope: if scope == "*tx" { "global tx" } else { "vault" },
                });
            }
        }
    }
    out
}

pub struct ReuseRun {
    pub packets: u64,
    pub page_turns: u64,
    pub overlaps: Vec<Overlap>,
    pub locked_after_crash: bool,
    pub restart_exit_code: Option<i32>,
    pub reconnected: bool,
    pub distribution_done: bool,
    pub delivered_chats: usize,
}

fn sent_packets(log: &[ConsumeRecord]) -> u64 {
    log.iter().filter(|r| r.dir == Direction::Tx && r.kind == ConsumeKind::Used && r.len == 16).count() as u64
}

/// Keep every idle session in `pairs` busy with chat until `target` packets
/// have been encrypted or `limit` passes.
fn chatter(w: &mut World, pairs: &[(u32, u32)], target: u64, limit: Duration, rng: &mut impl rand::Rng) {
    let end = w.now() + limit;
    while sent_packets(w.consume_log()) < target && w.now() < end {
        for &(node, pad) in pairs {
            let Some(n) = w.node(node) else { continue };
            let Some(s) = n.sessions().get(pad) else { continue };
            if s.phase() != otpad_core::session::Phase::Connected || s.is_busy() || s.is_halted() {
                continue;
            }
            let len = rng.gen_range(1..=400);
            let text: String = (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
            let _ = w.command(node, &format!("/{pad}"));
            let _ = w.command(node, &text);
        }
        let t = w.now() + Duration::from_millis(5);
        w.run_until(t);
    }
}

/// Ten thousand packets over 4 KiB pages with a crash, manual recovery and a
/// hub distribution along the way.
pub fn never_reuse_run(target: u64) -> ReuseRun {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
    let mut w = star(&Star {
        clients: 2,
        kb: 4,
        pages: 2000,
        reserve_pages: 64,
        allow_crash: true,
        link: LinkModel::fixed(Duration::from_millis(5)).with_drop(0.02).with_seed(5),
        ..Default::default()
    });
    connect(&mut w, 1);
    connect(&mut w, 2);
    let links = [(1, 1), (HUB, 1), (2, 2), (HUB, 2)];
    chatter(&mut w, &links, target * 3 / 10, Duration::from_secs(3600), &mut rng);

    // Crash client 1 in the middle of traffic.
    w.command(1, "/1").unwrap();
    let _ = w.command(1, "mid-flight");
    w.command(1, "/Z").unwrap();
    let locked_after_crash = w.store(1).unwrap().is_locked();
    let restart_exit_code = match w.start(1) {
        Err(otpad_core::harness::WorldError::App(e)) => Some(e.exit_code()),
        _ => None,
    };
    w.run_for(Duration::from_secs(5));
    w.shutdown(HUB).unwrap();
    w.recover_link(HUB, 1, 1).unwrap();
    w.start(HUB).unwrap();
    w.start(1).unwrap();
    // The hub's session with client 1 restarts clean; client 2's resumes.
    w.command(1, "/c").unwrap();
    let reconnected = w.run_until_cond(w.now() + Duration::from_secs(30), |w| {
        w.node(1).unwrap().sessions().get(1).unwrap().phase() == otpad_core::session::Phase::Connected
    });
    if w.node(2).unwrap().sessions().get(2).unwrap().phase() != otpad_core::session::Phase::Connected {
        connect(&mut w, 2);
    }
    chatter(&mut w, &links, target * 6 / 10, Duration::from_secs(3600), &mut rng);

    // Wait for quiet links, then distribute a pad to the two clients.
    w.run_until_cond(w.now() + Duration::from_secs(60), |w| {
        [(HUB, 1), (HUB, 2), (1, 1), (2, 2)].iter().all(|&(n, p)| !w.node(n).unwrap().sessions().get(p).unwrap().is_busy())
    });
    w.command(HUB, "/x1,2,40").unwrap();
    let distribution_done = w.run_until_cond(w.now() + Duration::from_secs(600), |w| {
        w.node(HUB).unwrap().distributions()[0].status == otpad_core::hub::DistributionStatus::Done
            && w.node(1).unwrap().sessions().len() == 2
            && w.node(2).unwrap().sessions().len() == 2
    });
    let new_pad = w.node(HUB).unwrap().distributions()[0].new_pad;
    if distribution_done {
        w.command(1, &format!("/{new_pad}")).unwrap();
        w.command(1, "/c").unwrap();
        w.run_for(Duration::from_secs(2));
    }
    let all = [(1, 1), (HUB, 1), (2, 2), (HUB, 2), (1, new_pad), (2, new_pad)];
    chatter(&mut w, &all, target, Duration::from_secs(3600), &mut rng);
    w.run_for(Duration::from_secs(10));

    let mut page_turns = 0;
    for id in [HUB, 1, 2] {
        if let Some(n) = w.node(id) {
            page_turns += n.sessions().iter().map(|s| s.stats.page_turns).sum::<u64>();
        }
    }
    let delivered_chats = [HUB, 1, 2].iter().map(|&n| chats_in(&w, n).len()).sum();
    let dists = w.node(HUB).unwrap().distributions().to_vec();
    w.shutdown_all().unwrap();
    ReuseRun {
        packets: sent_packets(w.consume_log()),
        page_turns,
        overlaps: find_overlaps(w.consume_log(), &dists),
        locked_after_crash,
        restart_exit_code,
        reconnected,
        distribution_done,
        delivered_chats,
    }
}

pub struct DistRun {
    pub reserve_bytes: u64,
    pub reserve_expected: u64,
    pub carved_bytes: u64,
    pub pages: u32,
    pub kb: u32,
    pub done: bool,
    pub remotes_are_peers: bool,
    pub peer_connected: bool,
    pub chat_arrived: bool,
    pub file_identical: bool,
    pub hub_saw: usize,
    pub overlaps: usize,
}

/// Five clients with 128 KiB pads, a 320 KiB reserve at the hub, then a fresh
/// pad for clients 1 and 2 which they use directly.
pub fn distribution_run(tmp: &Path) -> DistRun {
    use otpad_core::hub::{reserve_bytes_for, DistributionStatus};
    use otpad_core::session::Phase;
    use otpad_core::transport::Endpoint;
    use otpad_core::vault::RESERVE_PAD;

    let (kb, pages) = (4, 8);
    let mut w = star(&Star {
        clients: 5,
        kb: 4,
        pages: 32,
        reserve_pages: 80,
        trace: true,
        rx_dir: Some(tmp.to_path_buf()),
        ..Default::default()
    });
    let client_bytes: Vec<u64> = (1..=5).map(|i| w.node(i).unwrap().vault().metadata(i).unwrap().pad_bytes()).collect();
    let reserve_bytes = w.node(HUB).unwrap().vault().metadata(RESERVE_PAD).unwrap().pad_bytes();

    connect(&mut w, 1);
    connect(&mut w, 2);
    w.command(HUB, &format!("/x1,2,{pages}")).unwrap();
    w.run_until_cond(w.now() + Duration::from_secs(120), |w| {
        w.node(HUB).unwrap().distributions()[0].status != DistributionStatus::InFlight
    });
    let rec = w.node(HUB).unwrap().distributions()[0].clone();
    let done = rec.status == DistributionStatus::Done;
    let pad = rec.new_pad;
    let carved_bytes = w.node(HUB).unwrap().vault().reserve_carved_bytes();
    let remotes_are_peers = [1u32, 2].iter().all(|&c| {
        w.node(c).unwrap().sessions().get(pad).is_some_and(|s| s.remote() == Some(Endpoint::Sim(3 - c)))
    });

    let mark = w.net.trace().len();
    let mut peer_connected = false;
    let mut chat_arrived = false;
    let mut file_identical = false;
    if done {
        w.command(1, &format!("/{pad}")).unwrap();
        w.command(1, "/c").unwrap();
        w.run_for(Duration::from_secs(2));
        peer_connected = w.node(2).unwrap().sessions().get(pad).is_some_and(|s| s.phase() == Phase::Connected);
        w.command(1, "hello peer").unwrap();
        w.run_for(Duration::from_secs(1));
        chat_arrived = chats_in(&w, 2).contains(&"hello peer".to_string());

        let body: Vec<u8> = (0..6000u32).map(|i| (i * 7 % 251) as u8).collect();
        let path = write_file(&tmp.join("out"), "report.bin", &body);
        w.command(1, &format!("/s{}", path.display())).unwrap();
        if w.await_transfer(1, w.now() + Duration::from_secs(60)).is_some() {
            file_identical = std::fs::read(tmp.join("client2").join("report.bin")).is_ok_and(|got| got == body);
        }
    }
    let hub_saw = w.net.trace()[mark..]
        .iter()
        .filter(|t| t.to == Endpoint::Sim(HUB) || t.from == Endpoint::Sim(HUB))
        .count();
    w.shutdown_all().unwrap();
    DistRun {
        reserve_bytes,
        reserve_expected: reserve_bytes_for(&client_bytes),
        carved_bytes,
        pages,
        kb,
        done,
        remotes_are_peers,
        peer_connected,
        chat_arrived,
        file_identical,
        hub_saw,
        overlaps: find_overlaps(w.consume_log(), &[rec]).len(),
    }
}
