//! Where vault bytes live.
//!
//! [`DirStore`] is the on-disk hierarchy:
//!
//! ```text
//! <root>/
//!   00000/00000      page 0 of pad 0
//!   00000/00001      page 1 of pad 0
//!   00001/00000      page 0 of pad 1
//!   pad.metadata
//!   session.data
//!   vault.locked
//! ```
//!
//! [`MemStore`] keeps the same things in memory for simulation and the
//! browser demo. Clones share state, so a "restarted" node sees what a
//! "crashed" one left behind.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

pub const METADATA_FILE: &str = "pad.metadata";
pub const SESSION_FILE: &str = "session.data";
pub const LOCK_FILE: &str = "vault.locked";

/// Backing storage for a vault.
pub trait PageStore: Send {
    fn read_metadata(&self) -> io::Result<Option<String>>;
    /// Replace the metadata file atomically.
    fn write_metadata(&mut self, text: &str) -> io::Result<()>;
    fn read_page(&self, pad: u32, page: u32) -> io::Result<Option<Vec<u8>>>;
    fn write_page(&mut self, pad: u32, page: u32, bytes: &[u8]) -> io::Result<()>;
    /// Overwrite an existing page in place with `bytes` (same length).
    fn overwrite_page(&mut self, pad: u32, page: u32, bytes: &[u8]) -> io::Result<()>;
    fn delete_page(&mut self, pad: u32, page: u32) -> io::Result<()>;
    /// Whether any page file exists for `pad`.
    fn pad_has_pages(&self, pad: u32) -> io::Result<bool>;
    fn lock_present(&self) -> io::Result<bool>;
    /// Create the crash sentinel; fails with `AlreadyExists` if present.
    fn create_lock(&mut self) -> io::Result<()>;
    fn remove_lock(&mut self) -> io::Result<()>;
    fn read_session(&self) -> io::Result<Option<Vec<u8>>>;
    /// Replace the session file atomically.
    fn write_session(&mut self, bytes: &[u8]) -> io::Result<()>;
    fn describe(&self) -> String;
}

pub fn pad_dir_name(pad: u32) -> String {
    format!("{pad:05}")
}

pub fn page_file_name(page: u32) -> String {
    format!("{page:05}")
}

/// Vault rooted at a directory.
#[derive(Debug, Clone)]
pub struct DirStore {
    root: PathBuf,
}

impl DirStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn page_path(&self, pad: u32, page: u32) -> PathBuf {
        self.root.join(pad_dir_name(pad)).join(page_file_name(page))
    }

    fn read_optional(path: &Path) -> io::Result<Option<Vec<u8>>> {
        match fs::read(path) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn replace_atomically(&self, name: &str, bytes: &[u8]) -> io::Result<()> {
        fs::create_dir_all(&self.root)?;
        let tmp = self.root.join(format!(".{name}.tmp"));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_data()?;
        }
        fs::rename(&tmp, self.root.join(name))
    }
}

impl PageStore for DirStore {
    fn read_metadata(&self) -> io::Result<Option<String>> {
        Self::read_optional(&self.root.join(METADATA_FILE))?
            .map(|b| String::from_utf8(b).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)))
            .transpose()
    }

    fn write_metadata(&mut self, text: &str) -> io::Result<()> {
        self.replace_atomically(METADATA_FILE, text.as_bytes())
    }

    fn read_page(&self, pad: u32, page: u32) -> io::Result<Option<Vec<u8>>> {
        Self::read_optional(&self.page_path(pad, page))
    }

    fn write_page(&mut self, pad: u32, page: u32, bytes: &[u8]) -> io::Result<()> {
        let path = self.page_path(pad, page);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(&path)?;
        f.write_all(bytes)?;
        f.sync_data()
    }

    fn overwrite_page(&mut self, pad: u32, page: u32, bytes: &[u8]) -> io::Result<()> {
        // In place, so the old blocks are what gets overwritten.
        let mut f = fs::OpenOptions::new().write(true).open(self.page_path(pad, page))?;
        f.write_all(bytes)?;
        f.sync_data()
    }

    fn delete_page(&mut self, pad: u32, page: u32) -> io::Result<()> {
        match fs::remove_file(self.page_path(pad, page)) {
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            other => other,
        }
    }

    fn pad_has_pages(&self, pad: u32) -> io::Result<bool> {
        match fs::read_dir(self.root.join(pad_dir_name(pad))) {
            Ok(mut it) => Ok(it.next().is_some()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(false),
            Err(e) => Err(e),
        }
    }

    fn lock_present(&self) -> io::Result<bool> {
        Ok(self.root.join(LOCK_FILE).exists())
    }

    fn create_lock(&mut self) -> io::Result<()> {
        fs::create_dir_all(&self.root)?;
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(self.root.join(LOCK_FILE))
            .map(|_| ())
    }

    fn remove_lock(&mut self) -> io::Result<()> {
        match fs::remove_file(self.root.join(LOCK_FILE)) {
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            other => other,
        }
    }

    fn read_session(&self) -> io::Result<Option<Vec<u8>>> {
        Self::read_optional(&self.root.join(SESSION_FILE))
    }

    fn write_session(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.replace_atomically(SESSION_FILE, bytes)
    }

    fn describe(&self) -> String {
        self.root.display().to_string()
    }
}

#[derive(Debug, Default)]
struct MemInner {
    metadata: Option<String>,
    pages: BTreeMap<(u32, u32), Vec<u8>>,
    locked: bool,
    session: Option<Vec<u8>>,
}

/// In-memory vault; clones share the same contents.
#[derive(Debug, Clone, Default)]
pub struct MemStore {
    inner: Arc<Mutex<MemInner>>,
    name: Arc<str>,
}

impl MemStore {
    pub fn new(name: &str) -> Self {
        MemStore {
            inner: Arc::default(),
            name: name.into(),
        }
    }

    fn with<R>(&self, f: impl FnOnce(&mut MemInner) -> R) -> R {
        f(&mut self.inner.lock().expect("mem store poisoned"))
    }

    /// Direct page access for inspection and fault injection in tests.
    pub fn page(&self, pad: u32, page: u32) -> Option<Vec<u8>> {
        self.with(|m| m.pages.get(&(pad, page)).cloned())
    }

    pub fn set_page(&self, pad: u32, page: u32, bytes: Vec<u8>) {
        self.with(|m| {
            m.pages.insert((pad, page), bytes);
        })
    }

    pub fn page_keys(&self) -> Vec<(u32, u32)> {
        self.with(|m| m.pages.keys().copied().collect())
    }

    pub fn metadata_text(&self) -> Option<String> {
        self.with(|m| m.metadata.clone())
    }

    pub fn set_metadata_text(&self, text: &str) {
        self.with(|m| m.metadata = Some(text.to_owned()))
    }

    pub fn is_locked(&self) -> bool {
        self.with(|m| m.locked)
    }

    pub fn force_unlock(&self) {
        self.with(|m| m.locked = false)
    }

    pub fn clear_session(&self) {
        self.with(|m| m.session = None)
    }
}

impl PageStore for MemStore {
    fn read_metadata(&self) -> io::Result<Option<String>> {
        Ok(self.with(|m| m.metadata.clone()))
    }

    fn write_metadata(&mut self, text: &str) -> io::Result<()> {
        self.with(|m| m.metadata = Some(text.to_owned()));
        Ok(())
    }

    fn read_page(&self, pad: u32, page: u32) -> io::Result<Option<Vec<u8>>> {
        Ok(self.page(pad, page))
    }

    fn write_page(&mut self, pad: u32, page: u32, bytes: &[u8]) -> io::Result<()> {
        self.set_page(pad, page, bytes.to_vec());
        Ok(())
    }

    fn overwrite_page(&mut self, pad: u32, page: u32, bytes: &[u8]) -> io::Result<()> {
        self.with(|m| match m.pages.get_mut(&(pad, page)) {
            Some(p) => {
                p.copy_from_slice(bytes);
                Ok(())
            }
            None => Err(io::Error::new(io::ErrorKind::NotFound, "page missing")),
        })
    }

    fn delete_page(&mut self, pad: u32, page: u32) -> io::Result<()> {
        self.with(|m| m.pages.remove(&(pad, page)));
        Ok(())
    }

    fn pad_has_pages(&self, pad: u32) -> io::Result<bool> {
        Ok(self.with(|m| m.pages.range((pad, 0)..=(pad, u32::MAX)).next().is_some()))
    }

    fn lock_present(&self) -> io::Result<bool> {
        Ok(self.is_locked())
    }

    fn create_lock(&mut self) -> io::Result<()> {
        self.with(|m| {
            if m.locked {
                Err(io::Error::new(io::ErrorKind::AlreadyExists, LOCK_FILE))
            } else {
                m.locked = true;
                Ok(())
            }
        })
    }

    fn remove_lock(&mut self) -> io::Result<()> {
        self.force_unlock();
        Ok(())
    }

    fn read_session(&self) -> io::Result<Option<Vec<u8>>> {
        Ok(self.with(|m| m.session.clone()))
    }

    fn write_session(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.with(|m| m.session = Some(bytes.to_vec()));
        Ok(())
    }

    fn describe(&self) -> String {
        format!("mem:{}", self.name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dir_store_uses_five_digit_names() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = DirStore::new(dir.path());
        s.write_page(3, 17, b"abc").unwrap();
        assert!(dir.path().join("00003").join("00017").is_file());
        assert_eq!(s.read_page(3, 17).unwrap().unwrap(), b"abc");
        assert!(s.pad_has_pages(3).unwrap());
        assert!(!s.pad_has_pages(4).unwrap());
        s.overwrite_page(3, 17, b"xyz").unwrap();
        assert_eq!(s.read_page(3, 17).unwrap().unwrap(), b"xyz");
        s.delete_page(3, 17).unwrap();
        assert!(s.read_page(3, 17).unwrap().is_none());
    }

    #[test]
    fn dir_store_lock_and_atomic_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = DirStore::new(dir.path());
        assert!(!s.lock_present().unwrap());
        s.create_lock().unwrap();
        assert!(dir.path().join(LOCK_FILE).is_file());
        assert_eq!(s.create_lock().unwrap_err().kind(), io::ErrorKind::AlreadyExists);
        s.remove_lock().unwrap();
        s.write_metadata("m1").unwrap();
        s.write_metadata("m2").unwrap();
        assert_eq!(s.read_metadata().unwrap().unwrap(), "m2");
        s.write_session(&[1, 2]).unwrap();
        assert_eq!(s.read_session().unwrap().unwrap(), vec![1, 2]);
        let leftovers: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn mem_store_clones_share_state() {
        let a = MemStore::new("a");
        let mut b = a.clone();
        b.create_lock().unwrap();
        assert!(a.is_locked());
        b.write_page(1, 2, &[7]).unwrap();
        assert_eq!(a.page(1, 2), Some(vec![7]));
    }
}
