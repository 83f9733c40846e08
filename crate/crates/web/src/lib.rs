//! Three operations for the static demo page in `www/`. Every function
//! returns a JSON string so the page needs no glue beyond `JSON.parse`.

use std::time::Duration;

use otpad_core::app::{Config, NodeOptions};
use otpad_core::codec::{encrypt_packet, try_decrypt, KeySlice, PlaintextPacket, HEADER_LEN};
use otpad_core::harness::{provision, World};
use otpad_core::hygiene::Scrubber;
use otpad_core::jamlab::{self, VictimConfig};
use otpad_core::transport::LinkModel;
use otpad_core::vault::{MemStore, PadPlan, Role};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Chat type code on the wire.
const CHAT: u8 = 0x01;

/// Encrypt `text` as a chat packet with key bytes drawn from `seed`, then
/// decrypt it and try one tampered copy.
#[wasm_bindgen]
pub fn encrypt_packet_demo(text: &str, seed: u32) -> String {
    let plain = match PlaintextPacket::new(CHAT, text.as_bytes()) {
        Ok(p) => p,
        Err(e) => return json!({ "error": e.to_string() }).to_string(),
    };
    let mut noise = Scrubber::seeded(seed as u64);
    let a = noise.fresh(HEADER_LEN);
    let k = noise.fresh(plain.len());
    let mut scrub = Scrubber::seeded(0);
    let (c, ack) = encrypt_packet(&plain, &mut KeySlice::new(1, 0, 0, a.clone()), &mut KeySlice::new(1, 0, 16, k.clone()), &mut scrub)
        .expect("slices sized to the packet");
    let mac: [u8; HEADER_LEN] = a.as_slice().try_into().expect("16 bytes");
    let back = try_decrypt(c.as_bytes(), &mac, &k).ok().flatten();
    let mut bent = c.as_bytes().to_vec();
    let last = bent.len() - 1;
    bent[last] ^= 1;
    json!({
        "plaintext": hex::encode(plain.as_bytes()),
        "mac_key": hex::encode(&a),
        "pad": hex::encode(&k),
        "header": hex::encode(c.header()),
        "tail": hex::encode(c.tail()),
        "datagram_len": c.len(),
        "ack": hex::encode(ack),
        "decrypted": back.map(|p| String::from_utf8_lossy(p.payload()).into_owned()),
        "tampered_rejected": matches!(try_decrypt(&bent, &mac, &k), Ok(None)),
    })
    .to_string()
}

/// Send `bytes` of gibberish between two simulated nodes and report how long
/// the stop-and-wait transfer took.
#[wasm_bindgen]
pub fn stop_and_wait_demo(bytes: u32, rtt_ms: u32, loss: f64) -> String {
    let mut a = MemStore::new("hub");
    let mut b = MemStore::new("client");
    let plan = [PadPlan { pad_id: 1, kb_per_page: 512, pages: 8, reserve: false }];
    provision(&plan, &mut [(&mut a, Role::A), (&mut b, Role::B)], 1).expect("fresh stores");
    let link = LinkModel::fixed(Duration::from_micros(rtt_ms as u64 * 500));
    let mut w = World::new(link.clone());
    w.add_node(1, Config::server("hub"), a, None, NodeOptions::default()).expect("hub starts");
    w.add_node(2, Config::client(1, "client"), b, Some(1), NodeOptions::default()).expect("client starts");
    if w.command(2, "/c").is_err() {
        return json!({ "error": "connect failed" }).to_string();
    }
    w.run_for(Duration::from_secs(1));
    w.set_duplex(1, 2, link.with_drop(loss.clamp(0.0, 0.9)).with_seed(7));
    let stats = |w: &World, id| w.node(id).expect("node").sessions().get(1).expect("pad 1").stats;
    let (before, hub_before) = (stats(&w, 2), stats(&w, 1));
    if let Err(e) = w.command(2, &format!("/g{bytes}")) {
        return json!({ "error": e.to_string() }).to_string();
    }
    let t = w.await_transfer(2, w.now() + Duration::from_secs(3600));
    let (after, hub_after) = (stats(&w, 2), stats(&w, 1));
    let packets = after.sent - before.sent;
    json!({
        "seconds": t.map(|d| d.as_secs_f64()),
        "packets": packets,
        "retransmissions": after.retransmitted - before.retransmitted,
        "one_rtt_per_packet": packets as f64 * rtt_ms as f64 / 1000.0,
        "delivered": hub_after.received - hub_before.received,
        "duplicates_dropped": hub_after.duplicates - hub_before.duplicates,
    })
    .to_string()
}

/// A small jamming sweep: one row per frequency.
#[wasm_bindgen]
pub fn jam_sweep_demo(len: u32, freqs: &[f64]) -> String {
    let victim = VictimConfig { transfer_bytes: 20_000, limit: Duration::from_secs(120), ..Default::default() };
    let link = LinkModel::fixed(Duration::from_millis(15));
    let rows = jamlab::sweep(link, &victim, len as usize, freqs, jamlab::DEFAULT_BUDGET);
    serde_json::to_string(&rows).expect("reports serialize")
}
