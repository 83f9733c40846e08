//! Entropy installation, tracer verification, manual crash recovery.

use std::fs::File;
use std::io;

use super::metadata::{parse_metadata, serialize_metadata, PadMetadata};
use super::store::PageStore;
use super::VaultError;
use crate::hygiene::{Scrubber, SecretBuf};

/// A contiguous stream of entropy that is overwritten as it is consumed.
pub trait EntropySource {
    fn len(&self) -> u64;
    fn read_at(&mut self, offset: u64, buf: &mut [u8]) -> io::Result<()>;
    fn overwrite(&mut self, offset: u64, noise: &[u8]) -> io::Result<()>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// In-memory source, mostly for tests and simulation.
#[derive(Debug, Clone)]
pub struct MemSource(pub Vec<u8>);

impl EntropySource for MemSource {
    fn len(&self) -> u64 {
        self.0.len() as u64
    }

    fn read_at(&mut self, offset: u64, buf: &mut [u8]) -> io::Result<()> {
        let o = offset as usize;
        buf.copy_from_slice(&self.0[o..o + buf.len()]);
        Ok(())
    }

    fn overwrite(&mut self, offset: u64, noise: &[u8]) -> io::Result<()> {
        let o = offset as usize;
        self.0[o..o + noise.len()].copy_from_slice(noise);
        Ok(())
    }
}

/// A regular file (or block device) opened read-write.
#[derive(Debug)]
pub struct FileSource {
    file: File,
    len: u64,
}

impl FileSource {
    pub fn open(path: &std::path::Path) -> io::Result<Self> {
        let file = std::fs::OpenOptions::new().read(true).write(true).open(path)?;
        let len = file.metadata()?.len();
        Ok(FileSource { file, len })
    }
}

impl EntropySource for FileSource {
    fn len(&self) -> u64 {
        self.len
    }

    fn read_at(&mut self, offset: u64, buf: &mut [u8]) -> io::Result<()> {
        use std::io::{Read, Seek, SeekFrom};
        self.file.seek(SeekFrom::Start(offset))?;
        self.file.read_exact(buf)
    }

    fn overwrite(&mut self, offset: u64, noise: &[u8]) -> io::Result<()> {
        use std::io::{Seek, SeekFrom, Write};
        self.file.seek(SeekFrom::Start(offset))?;
        self.file.write_all(noise)?;
        self.file.sync_data()
    }
}

/// Geometry of one pad to carve from the source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadPlan {
    pub pad_id: u32,
    pub kb_per_page: u32,
    pub pages: u32,
    /// A hub reserve: transmit only, receive page pinned to the page count.
    pub reserve: bool,
}

impl PadPlan {
    pub fn bytes(&self) -> u64 {
        self.kb_per_page as u64 * 1024 * self.pages as u64
    }
}

/// Which end of the pad an endpoint is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Role {
    /// Transmits on page 0, receives on page 1.
    A,
    /// Transmits on page 1, receives on page 0.
    B,
}

impl Role {
    pub fn initial_metadata(self, plan: &PadPlan) -> PadMetadata {
        let (tx_pg, rx_pg) = match (plan.reserve, self) {
            (true, _) => (0, plan.pages),
            (false, Role::A) => (0, 1),
            (false, Role::B) => (1, 0),
        };
        PadMetadata {
            pad_id: plan.pad_id,
            kb_per_page: plan.kb_per_page,
            pages: plan.pages,
            tx_pg,
            rx_pg,
            tx_off: 0,
            rx_off: 0,
        }
    }

    pub fn peer(self) -> Role {
        match self {
            Role::A => Role::B,
            Role::B => Role::A,
        }
    }
}

impl std::str::FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "A" | "a" => Ok(Role::A),
            "B" | "b" => Ok(Role::B),
            other => Err(format!("role must be A or B, got {other:?}")),
        }
    }
}

/// An install target.
pub struct Destination<'a> {
    pub store: &'a mut dyn PageStore,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstallReport {
    pub pads: usize,
    pub pages: u64,
    pub bytes: u64,
    pub source_start: u64,
}

/// Copy planned pads from `source` into every destination, overwriting the
/// source as it goes. All destinations receive identical page contents.
pub fn install_entropy(
    source: &mut dyn EntropySource,
    source_start: u64,
    plan: &[PadPlan],
    dests: &mut [Destination<'_>],
    scrub: &mut Scrubber,
) -> Result<InstallReport, InstallError> {
    let need: u64 = plan.iter().map(PadPlan::bytes).sum();
    if source.len() < source_start + need {
        return Err(InstallError::SourceTooShort { need, have: source.len().saturating_sub(source_start) });
    }
    let mut existing = Vec::with_capacity(dests.len());
    for d in dests.iter() {
        if d.store.lock_present()? {
            return Err(InstallError::Vault(VaultError::VaultLocked(d.store.describe())));
        }
        let rows = match d.store.read_metadata()? {
            Some(text) => parse_metadata(&text).map_err(VaultError::from)?,
            None => Vec::new(),
        };
        for p in plan {
            if rows.iter().any(|r| r.pad_id == p.pad_id) || d.store.pad_has_pages(p.pad_id)? {
                return Err(InstallError::DestinationNotEmpty { target: d.store.describe(), pad: p.pad_id });
            }
        }
        existing.push(rows);
    }
    for p in plan {
        let meta = Role::A.initial_metadata(p);
        meta.validate(0).map_err(VaultError::from)?;
    }
    let mut offset = source_start;
    let mut pages = 0u64;
    for p in plan {
        let page_len = p.kb_per_page as usize * 1024;
        let mut buf = SecretBuf::new(vec![0u8; page_len]);
        for page in 0..p.pages {
            source.read_at(offset, buf.as_mut_slice())?;
            for d in dests.iter_mut() {
                d.store.write_page(p.pad_id, page, buf.as_slice())?;
            }
            let noise = scrub.fresh(page_len);
            source.overwrite(offset, &noise)?;
            offset += page_len as u64;
            pages += 1;
        }
    }
    for (d, mut rows) in dests.iter_mut().zip(existing) {
        rows.extend(plan.iter().map(|p| d.role.initial_metadata(p)));
        let text = serialize_metadata(&rows).map_err(VaultError::from)?;
        d.store.write_metadata(&text)?;
    }
    Ok(InstallReport {
        pads: plan.len(),
        pages,
        bytes: need,
        source_start,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum InstallError {
    #[error("source holds {have} bytes past the start offset, plan needs {need}")]
    SourceTooShort { need: u64, have: u64 },
    #[error("{target} already has pad {pad:05}")]
    DestinationNotEmpty { target: String, pad: u32 },
    #[error(transparent)]
    Vault(#[from] VaultError),
    #[error("install i/o: {0}")]
    Io(#[from] io::Error),
}

/// Tracer stream: each 8-byte aligned word is its own big-endian offset.
pub fn tracer_bytes(start: u64, len: usize) -> Vec<u8> {
    assert!(start.is_multiple_of(8), "tracer streams start on a word boundary");
    let mut out = Vec::with_capacity(len + 8);
    let mut off = start;
    while out.len() < len {
        out.extend_from_slice(&off.to_be_bytes());
        off += 8;
    }
    out.truncate(len);
    out
}

/// Something wrong with an installed tracer page.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TracerFinding {
    Missing { pad: u32, page: u32 },
    Short { pad: u32, page: u32, len: usize, want: usize },
    /// `first_bad` is the byte offset within the page; `actual_source` is the
    /// source offset the page's first word claims.
    Misplaced { pad: u32, page: u32, first_bad: usize, actual_source: u64 },
}

/// Check that every page holds exactly its expected source interval.
pub fn verify_tracer(store: &dyn PageStore, plan: &[PadPlan], source_start: u64) -> io::Result<Vec<TracerFinding>> {
    let mut findings = Vec::new();
    let mut expected = source_start;
    for p in plan {
        let want = p.kb_per_page as usize * 1024;
        for page in 0..p.pages {
            let base = expected;
            expected += want as u64;
            let Some(bytes) = store.read_page(p.pad_id, page)? else {
                findings.push(TracerFinding::Missing { pad: p.pad_id, page });
                continue;
            };
            if bytes.len() < want {
                findings.push(TracerFinding::Short { pad: p.pad_id, page, len: bytes.len(), want });
                continue;
            }
            let bad = bytes.chunks_exact(8).enumerate().find(|(i, w)| {
                u64::from_be_bytes((*w).try_into().expect("8-byte word")) != base + 8 * *i as u64
            });
            if let Some((i, _)) = bad {
                let actual_source = u64::from_be_bytes(bytes[..8].try_into().expect("8-byte word"));
                findings.push(TracerFinding::Misplaced { pad: p.pad_id, page, first_bad: i * 8, actual_source });
            }
        }
    }
    Ok(findings)
}

/// Manual recovery after a crash: move both cursors of `pad` to fresh pages,
/// destroy whatever the old pages still hold, drop that pad's session state and
/// clear the lock. Both ends must be given mirrored page numbers.
pub fn recover_pad(
    store: &mut dyn PageStore,
    pad: u32,
    new_tx: u32,
    new_rx: u32,
    scrub: &mut Scrubber,
) -> Result<PadMetadata, VaultError> {
    let text = store.read_metadata()?.ok_or(VaultError::UnknownPad(pad))?;
    let mut rows = parse_metadata(&text)?;
    let row = rows.iter_mut().find(|r| r.pad_id == pad).ok_or(VaultError::UnknownPad(pad))?;
    if new_tx == new_rx {
        return Err(VaultError::PageCollision { page: new_tx });
    }
    let used = row.tx_pg.max(row.rx_pg).min(row.pages.saturating_sub(1));
    for page in [new_tx, new_rx] {
        if page <= used && page < row.pages {
            return Err(VaultError::PageAlreadyUsed { pad, page });
        }
    }
    for old in [row.tx_pg, row.rx_pg] {
        if old < row.pages {
            if let Some(bytes) = store.read_page(pad, old)? {
                let noise = scrub.fresh(bytes.len());
                drop(SecretBuf::new(bytes));
                store.overwrite_page(pad, old, &noise)?;
            }
        }
    }
    row.tx_pg = new_tx.min(row.pages);
    row.rx_pg = if new_rx >= row.pages && row.tx_pg == row.pages {
        super::RX_EXHAUSTED_SENTINEL
    } else {
        new_rx.min(row.pages)
    };
    row.tx_off = 0;
    row.rx_off = 0;
    let out = *row;
    store.write_metadata(&serialize_metadata(&rows)?)?;
    let kept = match store.read_session()? {
        Some(bytes) => match crate::session::decode_sessions(&bytes) {
            Ok((snaps, trailer)) => {
                let others: Vec<_> = snaps.into_iter().filter(|s| s.pad_id != pad).collect();
                crate::session::encode_sessions(&others, &trailer)
            }
            Err(_) => Vec::new(),
        },
        None => Vec::new(),
    };
    store.write_session(&kept)?;
    store.remove_lock()?;
    Ok(out)
}
