//! Hub mode: client address learning, reserve sizing, and shipping fresh pads
//! to pairs of clients over their existing links.

use std::collections::BTreeMap;
use std::ops::Range;
use std::time::Duration;

use thiserror::Error;

use crate::hygiene::SecretBuf;
use crate::transport::Endpoint;
use crate::vault::{PadMetadata, Role, VaultError, MAX_PAD_ID};

/// File-name prefix that marks distribution traffic.
pub const DIST_PREFIX: &str = "__otpdist__/";

/// Number of distinct pairs among `n` users.
pub fn pair_count(n: u64) -> u64 {
    if n < 2 {
        0
    } else {
        n * (n - 1) / 2
    }
}

/// Reserve bytes to hold for clients of the given pad sizes: each fresh pad is
/// shared by two clients, so half their combined capacity.
pub fn reserve_bytes_for(client_pad_bytes: &[u64]) -> u64 {
    client_pad_bytes.iter().sum::<u64>() / 2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct ClientEntry {
    pub addr: Endpoint,
    pub learned_at: Duration,
}

/// Where each client was last heard from. Only successful decryptions update it.
#[derive(Debug, Default, Clone)]
pub struct ClientRegistry {
    entries: BTreeMap<u32, ClientEntry>,
}

impl ClientRegistry {
    pub fn learn_client(&mut self, pad: u32, addr: Endpoint, now: Duration) {
        self.entries.insert(pad, ClientEntry { addr, learned_at: now });
    }

    pub fn get(&self, pad: u32) -> Option<&ClientEntry> {
        self.entries.get(&pad)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &ClientEntry)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum HubError {
    #[error("this node is not a hub")]
    NotAHub,
    #[error("client on pad {0:05} is not connected")]
    ClientUnreachable(u32),
    #[error("client on pad {0:05} is busy")]
    ClientBusy(u32),
    #[error("pad id {0} cannot be used for a distributed pad")]
    BadPadId(u32),
    #[error("both ends of a distribution must be different clients")]
    SameClient,
    #[error(transparent)]
    Vault(#[from] VaultError),
}

/// Sent ahead of the pages so the client knows what it is assembling.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DistributionManifest {
    pub pad_id: u32,
    pub kb_per_page: u32,
    pub pages: u32,
    pub role: Role,
    /// The other client's address as the hub last saw it.
    pub peer: Option<Endpoint>,
}

impl DistributionManifest {
    pub fn metadata(&self) -> PadMetadata {
        let (tx_pg, rx_pg) = match self.role {
            Role::A => (0, 1),
            Role::B => (1, 0),
        };
        PadMetadata {
            pad_id: self.pad_id,
            kb_per_page: self.kb_per_page,
            pages: self.pages,
            tx_pg,
            rx_pg,
            tx_off: 0,
            rx_off: 0,
        }
    }
}

/// What a distribution file name refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistItem {
    Manifest { pad: u32 },
    Page { pad: u32, page: u32 },
}

pub fn manifest_name(pad: u32) -> String {
    format!("{DIST_PREFIX}{pad:05}/manifest")
}

pub fn page_name(pad: u32, page: u32) -> String {
    format!("{DIST_PREFIX}{pad:05}/{page:05}")
}

pub fn parse_dist_name(name: &str) -> Option<DistItem> {
    let rest = name.strip_prefix(DIST_PREFIX)?;
    let (pad, what) = rest.split_once('/')?;
    let pad: u32 = pad.parse().ok()?;
    if pad > MAX_PAD_ID {
        return None;
    }
    if what == "manifest" {
        return Some(DistItem::Manifest { pad });
    }
    Some(DistItem::Page { pad, page: what.parse().ok()? })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionStatus {
    InFlight,
    Done,
    Failed,
}

/// One hub-initiated distribution.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct DistributionRecord {
    pub new_pad: u32,
    pub client_a: u32,
    pub client_b: u32,
    /// Reserve pages the new pad was carved from, in order.
    pub reserve_pages: Range<u32>,
    pub kb_per_page: u32,
    pub status: DistributionStatus,
    pub acked: [bool; 2],
}

/// Default id for a pad carved starting at `first_page` of the reserve.
/// Reserve pages are carved once, so this never repeats for one hub.
pub fn default_pad_id(highest_hub_pad: u32, first_page: u32) -> Result<u32, HubError> {
    let id = highest_hub_pad as u64 + 1 + first_page as u64;
    if id > MAX_PAD_ID as u64 {
        return Err(HubError::BadPadId(id as u32));
    }
    Ok(id as u32)
}

/// Client-side collection of a pad arriving over the link.
#[derive(Debug, Default)]
pub struct Assembly {
    pub manifest: Option<DistributionManifest>,
    pages: BTreeMap<u32, SecretBuf>,
}

impl Assembly {
    pub fn add_page(&mut self, page: u32, bytes: SecretBuf) {
        self.pages.insert(page, bytes);
    }

    pub fn received_pages(&self) -> usize {
        self.pages.len()
    }

    /// Metadata and pages once everything has arrived and has the right size.
    pub fn take_complete(&mut self) -> Option<(DistributionManifest, Vec<SecretBuf>)> {
        let m = self.manifest.as_ref()?;
        let want = m.kb_per_page as usize * 1024;
        if self.pages.len() != m.pages as usize
            || !(0..m.pages).all(|p| self.pages.get(&p).is_some_and(|b| b.len() == want))
        {
            return None;
        }
        let m = self.manifest.take()?;
        let pages = std::mem::take(&mut self.pages).into_values().collect();
        Some((m, pages))
    }
}
