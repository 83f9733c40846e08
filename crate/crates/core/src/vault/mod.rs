//! Pad repository: metadata, page loading, cursor bookkeeping, lock file.

mod install;
mod metadata;
mod store;

use std::collections::HashMap;
use std::io;

use indexmap::IndexMap;
use thiserror::Error;

use crate::codec::KeySlice;
use crate::hygiene::{HygieneEvent, NoPlatformHooks, PlatformHooks, Scrubber, SecretBuf};

pub use install::{
    install_entropy, recover_pad, tracer_bytes, verify_tracer, Destination, EntropySource, FileSource, InstallError,
    InstallReport, MemSource, PadPlan, Role, TracerFinding,
};
pub use metadata::{
    parse_metadata, serialize_metadata, MetadataError, PadMetadata, HEADER as METADATA_HEADER, MAX_KB_PER_PAGE,
    MAX_OFFSET, MAX_PADS, MAX_PAD_BYTES, MAX_PAD_ID, MAX_PAGES, RX_EXHAUSTED_SENTINEL, TX_EXHAUSTED_SENTINEL,
};
pub use store::{DirStore, MemStore, PageStore, LOCK_FILE, METADATA_FILE, SESSION_FILE};

/// Reserved pad id for a hub's undistributed entropy.
pub const RESERVE_PAD: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Tx,
    Rx,
}

impl Direction {
    pub fn opposite(self) -> Direction {
        match self {
            Direction::Tx => Direction::Rx,
            Direction::Rx => Direction::Tx,
        }
    }
}

#[derive(Debug, Error)]
pub enum VaultError {
    #[error("vault {0} is locked; a previous run did not shut down cleanly")]
    VaultLocked(String),
    #[error("metadata: {0}")]
    Metadata(#[from] MetadataError),
    #[error("vault i/o: {0}")]
    Io(#[from] io::Error),
    #[error("no pad {0:05} in this vault")]
    UnknownPad(u32),
    #[error("pad {pad:05} already exists")]
    PadExists { pad: u32 },
    #[error("page file {pad:05}/{page:05} is missing")]
    PageMissing { pad: u32, page: u32 },
    #[error("page file {pad:05}/{page:05} has {got} bytes, expected {want}")]
    PageLength { pad: u32, page: u32, want: usize, got: usize },
    #[error("pad {pad:05} is exhausted for {dir:?}")]
    PadExhausted { pad: u32, dir: Direction },
    #[error("pad {pad:05} {dir:?} page has {remaining} bytes left, {want} requested")]
    InsufficientPage { pad: u32, dir: Direction, remaining: usize, want: usize },
    #[error("offset {offset} is behind the {dir:?} cursor of pad {pad:05}")]
    OffsetBehindCursor { pad: u32, dir: Direction, offset: usize },
    #[error("page {page} is the current page of the other direction")]
    PageCollision { page: u32 },
    #[error("page {page} of pad {pad:05} has already been used")]
    PageAlreadyUsed { pad: u32, page: u32 },
    #[error("reserve has {available} pages left, {wanted} requested")]
    ReserveExhausted { available: u32, wanted: u32 },
}

/// Per-vault switches.
#[derive(Debug, Clone, Default)]
pub struct VaultOptions {
    /// Leave page files intact when they are loaded.
    pub have_mercy: bool,
    /// Remove page files once a page has been turned away from.
    pub delete_turned_pages: bool,
    /// Deterministic overwrite stream; `None` seeds from the OS.
    pub scrub_seed: Option<u64>,
    /// Record hygiene events for inspection.
    pub log_hygiene: bool,
    /// Record every consumed or carved key interval.
    pub log_consumption: bool,
    /// Name used in logs and consumption records.
    pub label: String,
}

/// How a key interval left the vault.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum ConsumeKind {
    /// Handed to the codec.
    Used,
    /// Jumped over by a resync and destroyed unused.
    Skipped,
    /// Removed from the reserve for distribution.
    Carved,
}

/// One interval of key material that left the vault.
#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize)]
pub struct ConsumeRecord {
    pub vault: String,
    pub pad: u32,
    pub page: u32,
    pub dir: Direction,
    pub offset: u64,
    pub len: usize,
    pub kind: ConsumeKind,
}

/// A page held in memory for one direction.
#[derive(Debug)]
pub struct LoadedPage {
    pub pad_id: u32,
    pub page_no: u32,
    pub direction: Direction,
    buffer: SecretBuf,
    pub obliterated_on_disk: bool,
}

impl LoadedPage {
    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub(crate) fn bytes(&self) -> &[u8] {
        self.buffer.as_slice()
    }
}

/// An opened, locked vault.
pub struct Vault {
    store: Box<dyn PageStore>,
    pads: IndexMap<u32, PadMetadata>,
    loaded: HashMap<(u32, Direction), LoadedPage>,
    opts: VaultOptions,
    scrub: Scrubber,
    hooks: Box<dyn PlatformHooks>,
    consume_log: Vec<ConsumeRecord>,
    released: bool,
}

impl std::fmt::Debug for Vault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Vault")
            .field("store", &self.store.describe())
            .field("pads", &self.pads.len())
            .field("loaded", &self.loaded.len())
            .finish()
    }
}

impl Vault {
    /// Open a vault and take its lock.
    pub fn open(store: impl PageStore + 'static, opts: VaultOptions) -> Result<Vault, VaultError> {
        Self::open_boxed(Box::new(store), opts)
    }

    pub fn open_boxed(mut store: Box<dyn PageStore>, opts: VaultOptions) -> Result<Vault, VaultError> {
        if store.lock_present()? {
            return Err(VaultError::VaultLocked(store.describe()));
        }
        let rows = match store.read_metadata()? {
            Some(text) => parse_metadata(&text)?,
            None => Vec::new(),
        };
        match store.create_lock() {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                return Err(VaultError::VaultLocked(store.describe()))
            }
            Err(e) => return Err(e.into()),
        }
        let mut scrub = match opts.scrub_seed {
            Some(seed) => Scrubber::seeded(seed),
            None => Scrubber::from_os(),
        };
        if opts.log_hygiene {
            scrub = scrub.with_log();
        }
        Ok(Vault {
            store,
            pads: rows.into_iter().map(|r| (r.pad_id, r)).collect(),
            loaded: HashMap::new(),
            opts,
            scrub,
            hooks: Box::new(NoPlatformHooks),
            consume_log: Vec::new(),
            released: false,
        })
    }

    pub fn set_platform_hooks(&mut self, hooks: Box<dyn PlatformHooks>) {
        self.hooks = hooks;
    }

    pub fn label(&self) -> &str {
        &self.opts.label
    }

    pub fn options(&self) -> &VaultOptions {
        &self.opts
    }

    pub fn store(&self) -> &dyn PageStore {
        self.store.as_ref()
    }

    pub fn scrubber(&mut self) -> &mut Scrubber {
        &mut self.scrub
    }

    pub fn pad_ids(&self) -> Vec<u32> {
        self.pads.keys().copied().collect()
    }

    pub fn metadata(&self, pad: u32) -> Option<&PadMetadata> {
        self.pads.get(&pad)
    }

    /// Rows in file order, as `pad.metadata` would hold them now.
    pub fn rows(&self) -> Vec<PadMetadata> {
        self.pads.values().copied().collect()
    }

    fn meta(&self, pad: u32) -> Result<&PadMetadata, VaultError> {
        self.pads.get(&pad).ok_or(VaultError::UnknownPad(pad))
    }

    fn cursor(&self, pad: u32, dir: Direction) -> Result<(u32, usize), VaultError> {
        let m = self.meta(pad)?;
        Ok(match dir {
            Direction::Tx => (m.tx_pg, m.tx_off as usize),
            Direction::Rx => (m.rx_pg, m.rx_off as usize),
        })
    }

    pub fn is_exhausted(&self, pad: u32, dir: Direction) -> bool {
        match self.pads.get(&pad) {
            Some(m) => match dir {
                Direction::Tx => m.tx_exhausted(),
                Direction::Rx => m.rx_exhausted(),
            },
            None => true,
        }
    }

    /// Unused bytes left on the current page of `dir`.
    pub fn remaining(&self, pad: u32, dir: Direction) -> usize {
        match self.pads.get(&pad) {
            Some(m) if !self.is_exhausted(pad, dir) => {
                let off = if dir == Direction::Tx { m.tx_off } else { m.rx_off };
                m.page_bytes() - off as usize
            }
            _ => 0,
        }
    }

    pub fn loaded_page(&self, pad: u32, dir: Direction) -> Option<&LoadedPage> {
        self.loaded.get(&(pad, dir))
    }

    /// Bring the current page of `dir` into memory. Idempotent.
    pub fn load_page(&mut self, pad: u32, dir: Direction) -> Result<&LoadedPage, VaultError> {
        let (page, off) = self.cursor(pad, dir)?;
        if self.is_exhausted(pad, dir) {
            return Err(VaultError::PadExhausted { pad, dir });
        }
        let stale = matches!(self.loaded.get(&(pad, dir)), Some(p) if p.page_no != page);
        if stale {
            self.unload(pad, dir);
        }
        if !self.loaded.contains_key(&(pad, dir)) {
            let want = self.meta(pad)?.page_bytes();
            let mut bytes = self.store.read_page(pad, page)?.ok_or(VaultError::PageMissing { pad, page })?;
            if bytes.len() != want {
                crate::hygiene::scrub_in_place(&mut bytes);
                return Err(VaultError::PageLength { pad, page, want, got: bytes.len() });
            }
            let mut buffer = SecretBuf::new(bytes);
            self.hooks.lock_buffer(buffer.as_slice());
            self.scrub.record(HygieneEvent::PageRead { pad, page, direction: dir });
            let obliterated = !self.opts.have_mercy;
            if obliterated {
                let noise = self.scrub.fresh(want);
                self.store.overwrite_page(pad, page, &noise)?;
                self.scrub.record(HygieneEvent::PageObliterated { pad, page });
            }
            // Anything behind the cursor was spent in an earlier run.
            self.scrub.overwrite(&mut buffer.as_mut_slice()[..off]);
            self.loaded.insert(
                (pad, dir),
                LoadedPage {
                    pad_id: pad,
                    page_no: page,
                    direction: dir,
                    buffer,
                    obliterated_on_disk: obliterated,
                },
            );
        }
        Ok(&self.loaded[&(pad, dir)])
    }

    fn unload(&mut self, pad: u32, dir: Direction) {
        if let Some(page) = self.loaded.remove(&(pad, dir)) {
            self.hooks.unlock_buffer(page.buffer.as_slice());
        }
    }

    /// Read candidate key bytes at `offset` on the current receive page
    /// without consuming anything. `None` if they would run past the page.
    pub fn peek(&mut self, pad: u32, dir: Direction, offset: usize, len: usize) -> Result<Option<&[u8]>, VaultError> {
        let (_, cur) = self.cursor(pad, dir)?;
        if offset < cur {
            return Err(VaultError::OffsetBehindCursor { pad, dir, offset });
        }
        let page = self.load_page(pad, dir)?;
        Ok(page.buffer.as_slice().get(offset..offset + len))
    }

    /// Take the next `n` bytes of `dir`.
    pub fn consume(&mut self, pad: u32, dir: Direction, n: usize) -> Result<KeySlice, VaultError> {
        let (_, off) = self.cursor(pad, dir)?;
        self.consume_at(pad, dir, off, n)
    }

    /// Take `n` bytes at `offset`, destroying any unused bytes between the
    /// cursor and `offset`.
    pub fn consume_at(&mut self, pad: u32, dir: Direction, offset: usize, n: usize) -> Result<KeySlice, VaultError> {
        let (page_no, cur) = self.cursor(pad, dir)?;
        if offset < cur {
            return Err(VaultError::OffsetBehindCursor { pad, dir, offset });
        }
        let remaining = self.remaining(pad, dir);
        if self.is_exhausted(pad, dir) {
            return Err(VaultError::PadExhausted { pad, dir });
        }
        if offset - cur + n > remaining {
            return Err(VaultError::InsufficientPage { pad, dir, remaining: remaining - (offset - cur), want: n });
        }
        self.load_page(pad, dir)?;
        let label = self.opts.label.clone();
        let page = self.loaded.get_mut(&(pad, dir)).expect("page loaded above");
        let buf = page.buffer.as_mut_slice();
        if offset > cur {
            self.scrub.overwrite(&mut buf[cur..offset]);
            if self.opts.log_consumption {
                self.consume_log.push(ConsumeRecord {
                    vault: label.clone(),
                    pad,
                    page: page_no,
                    dir,
                    offset: cur as u64,
                    len: offset - cur,
                    kind: ConsumeKind::Skipped,
                });
            }
        }
        let bytes = buf[offset..offset + n].to_vec();
        self.scrub.overwrite(&mut buf[offset..offset + n]);
        self.scrub.record(HygieneEvent::KeyConsumed { pad, page: page_no, offset: offset as u64, len: n });
        if self.opts.log_consumption {
            self.consume_log.push(ConsumeRecord {
                vault: label,
                pad,
                page: page_no,
                dir,
                offset: offset as u64,
                len: n,
                kind: ConsumeKind::Used,
            });
        }
        let m = self.pads.get_mut(&pad).expect("pad checked above");
        let new_off = (offset + n) as u32;
        match dir {
            Direction::Tx => m.tx_off = new_off,
            Direction::Rx => m.rx_off = new_off,
        }
        self.persist_metadata()?;
        Ok(KeySlice::new(pad, page_no, offset as u64, bytes))
    }

    /// Highest page number either direction has ever been on.
    pub fn highest_page(&self, pad: u32) -> Result<u32, VaultError> {
        let m = self.meta(pad)?;
        // Pages are granted in increasing order, so once one direction has run
        // off the end every page has been used.
        if m.tx_exhausted() || m.rx_exhausted() {
            return Ok(m.pages.saturating_sub(1));
        }
        Ok(m.tx_pg.max(m.rx_pg))
    }

    /// Move `dir` to `new_page` at offset 0. A page at or past the pad's page
    /// count marks the direction exhausted.
    pub fn turn_page(&mut self, pad: u32, dir: Direction, new_page: u32) -> Result<(), VaultError> {
        let m = *self.meta(pad)?;
        let (old, other) = match dir {
            Direction::Tx => (m.tx_pg, m.rx_pg),
            Direction::Rx => (m.rx_pg, m.tx_pg),
        };
        let target = if new_page >= m.pages {
            let sentinel = match dir {
                Direction::Tx => TX_EXHAUSTED_SENTINEL,
                Direction::Rx => RX_EXHAUSTED_SENTINEL,
            };
            if other == m.pages {
                sentinel
            } else {
                m.pages
            }
        } else {
            if new_page == other {
                return Err(VaultError::PageCollision { page: new_page });
            }
            if new_page <= self.highest_page(pad)? {
                return Err(VaultError::PageAlreadyUsed { pad, page: new_page });
            }
            new_page
        };
        if old < m.pages {
            self.destroy_page(pad, dir, old)?;
        }
        let m = self.pads.get_mut(&pad).expect("pad checked above");
        match dir {
            Direction::Tx => {
                m.tx_pg = target;
                m.tx_off = 0;
            }
            Direction::Rx => {
                m.rx_pg = target;
                m.rx_off = 0;
            }
        }
        self.persist_metadata()
    }

    fn destroy_page(&mut self, pad: u32, dir: Direction, page: u32) -> Result<(), VaultError> {
        if let Some(mut p) = self.loaded.remove(&(pad, dir)) {
            self.scrub.overwrite(p.buffer.as_mut_slice());
            self.hooks.unlock_buffer(p.buffer.as_slice());
        }
        if let Some(bytes) = self.store.read_page(pad, page)? {
            let noise = self.scrub.fresh(bytes.len());
            drop(SecretBuf::new(bytes));
            self.store.overwrite_page(pad, page, &noise)?;
        }
        if self.opts.delete_turned_pages {
            self.store.delete_page(pad, page)?;
        }
        Ok(())
    }

    fn persist_metadata(&mut self) -> Result<(), VaultError> {
        let text = serialize_metadata(&self.rows())?;
        self.store.write_metadata(&text)?;
        Ok(())
    }

    /// Add a pad whose page contents are supplied in memory.
    pub fn install_pad(&mut self, meta: PadMetadata, pages: &[SecretBuf]) -> Result<(), VaultError> {
        meta.validate(0)?;
        if self.pads.contains_key(&meta.pad_id) || self.store.pad_has_pages(meta.pad_id)? {
            return Err(VaultError::PadExists { pad: meta.pad_id });
        }
        if self.pads.len() >= MAX_PADS {
            return Err(MetadataError::RefusedTooManyPads(self.pads.len() + 1).into());
        }
        for (i, page) in pages.iter().enumerate() {
            if page.len() != meta.page_bytes() {
                return Err(VaultError::PageLength {
                    pad: meta.pad_id,
                    page: i as u32,
                    want: meta.page_bytes(),
                    got: page.len(),
                });
            }
            self.store.write_page(meta.pad_id, i as u32, page.as_slice())?;
        }
        self.pads.insert(meta.pad_id, meta);
        self.persist_metadata()
    }

    /// Remove `n_pages` whole pages from the reserve pad.
    pub fn carve_reserve(&mut self, n_pages: u32) -> Result<Vec<SecretBuf>, VaultError> {
        let m = *self.meta(RESERVE_PAD)?;
        let start = m.tx_pg.min(m.pages);
        let available = m.pages - start;
        if n_pages > available {
            return Err(VaultError::ReserveExhausted { available, wanted: n_pages });
        }
        let mut out = Vec::with_capacity(n_pages as usize);
        for page in start..start + n_pages {
            let bytes = self
                .store
                .read_page(RESERVE_PAD, page)?
                .ok_or(VaultError::PageMissing { pad: RESERVE_PAD, page })?;
            let buf = SecretBuf::new(bytes);
            self.scrub.record(HygieneEvent::PageRead { pad: RESERVE_PAD, page, direction: Direction::Tx });
            let noise = self.scrub.fresh(buf.len());
            self.store.overwrite_page(RESERVE_PAD, page, &noise)?;
            self.store.delete_page(RESERVE_PAD, page)?;
            self.scrub.record(HygieneEvent::PageObliterated { pad: RESERVE_PAD, page });
            if self.opts.log_consumption {
                self.consume_log.push(ConsumeRecord {
                    vault: self.opts.label.clone(),
                    pad: RESERVE_PAD,
                    page,
                    dir: Direction::Tx,
                    offset: 0,
                    len: buf.len(),
                    kind: ConsumeKind::Carved,
                });
            }
            out.push(buf);
        }
        let next = start + n_pages;
        let rm = self.pads.get_mut(&RESERVE_PAD).expect("reserve checked above");
        rm.tx_pg = if next == rm.rx_pg { TX_EXHAUSTED_SENTINEL } else { next };
        rm.tx_off = 0;
        self.persist_metadata()?;
        Ok(out)
    }

    /// Bytes carved from the reserve so far.
    pub fn reserve_carved_bytes(&self) -> u64 {
        self.pads
            .get(&RESERVE_PAD)
            .map(|m| m.tx_pg.min(m.pages) as u64 * m.page_bytes() as u64)
            .unwrap_or(0)
    }

    pub fn reserve_remaining_bytes(&self) -> u64 {
        self.pads
            .get(&RESERVE_PAD)
            .map(|m| m.pad_bytes() - self.reserve_carved_bytes())
            .unwrap_or(0)
    }

    pub fn consume_log(&self) -> &[ConsumeRecord] {
        &self.consume_log
    }

    pub fn take_consume_log(&mut self) -> Vec<ConsumeRecord> {
        std::mem::take(&mut self.consume_log)
    }

    pub fn read_session_file(&self) -> Result<Option<Vec<u8>>, VaultError> {
        Ok(self.store.read_session()?)
    }

    pub fn write_session_file(&mut self, bytes: &[u8]) -> Result<(), VaultError> {
        Ok(self.store.write_session(bytes)?)
    }

    /// Clean shutdown: write loaded pages back, flush metadata and session
    /// state, release the lock. On error the lock stays in place.
    pub fn persist_on_shutdown(&mut self, session: Option<&[u8]>) -> Result<(), VaultError> {
        let keys: Vec<(u32, Direction)> = self.loaded.keys().copied().collect();
        for key in keys {
            let page = self.loaded.remove(&key).expect("key from map");
            self.store.write_page(page.pad_id, page.page_no, page.buffer.as_slice())?;
            self.scrub.record(HygieneEvent::PageWrittenBack { pad: page.pad_id, page: page.page_no });
            self.hooks.unlock_buffer(page.buffer.as_slice());
        }
        self.persist_metadata()?;
        if let Some(bytes) = session {
            self.store.write_session(bytes)?;
        }
        self.store.remove_lock()?;
        self.released = true;
        Ok(())
    }

    pub fn is_released(&self) -> bool {
        self.released
    }
}

impl Drop for Vault {
    fn drop(&mut self) {
        for (_, mut page) in self.loaded.drain() {
            self.scrub.overwrite(page.buffer.as_mut_slice());
            self.hooks.unlock_buffer(page.buffer.as_slice());
        }
    }
}
