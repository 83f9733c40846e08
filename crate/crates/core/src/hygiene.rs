//! Key-material hygiene: overwrite patterns and an ordering log.
//!
//! Spent key bytes are overwritten with fresh pseudorandom bytes, never with
//! zeros (a zero-filled page can end up stored sparse or compressed). The
//! generator is seeded in tests so runs are reproducible.
//!
//! Platform concerns such as cache-bypassing I/O and memory locking are
//! reached through [`PlatformHooks`]; the portable contract is the *order*
//! of operations, which is recorded as [`HygieneEvent`]s when enabled.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::vault::Direction;

/// Something that happened to key material, in the order it happened.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HygieneEvent {
    PageRead { pad: u32, page: u32, direction: Direction },
    PageObliterated { pad: u32, page: u32 },
    KeyConsumed { pad: u32, page: u32, offset: u64, len: usize },
    KeyDestroyed { pad: u32, page: u32, offset: u64 },
    DatagramEmitted { len: usize },
    PageWrittenBack { pad: u32, page: u32 },
}

/// Hooks for platform-specific protections around page buffers.
pub trait PlatformHooks: Send {
    /// Called with a freshly loaded page buffer. Implementations may pin it.
    fn lock_buffer(&self, _buf: &[u8]) {}
    /// Called before a page buffer is released.
    fn unlock_buffer(&self, _buf: &[u8]) {}
}

/// Default hooks: no pinning, plain buffered I/O.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoPlatformHooks;

impl PlatformHooks for NoPlatformHooks {}

/// Source of overwrite bytes plus an optional ordering log.
pub struct Scrubber {
    rng: ChaCha20Rng,
    log: Option<Vec<HygieneEvent>>,
}

impl std::fmt::Debug for Scrubber {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scrubber")
            .field("logging", &self.log.is_some())
            .finish()
    }
}

impl Scrubber {
    /// Deterministic overwrite stream, for tests and simulation.
    pub fn seeded(seed: u64) -> Self {
        Scrubber {
            rng: ChaCha20Rng::seed_from_u64(seed),
            log: None,
        }
    }

    /// Overwrite stream seeded from the operating system.
    pub fn from_os() -> Self {
        Scrubber {
            rng: ChaCha20Rng::from_entropy(),
            log: None,
        }
    }

    pub fn with_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn overwrite(&mut self, buf: &mut [u8]) {
        self.rng.fill_bytes(buf);
    }

    pub fn fresh(&mut self, len: usize) -> Vec<u8> {
        let mut v = vec![0u8; len];
        self.rng.fill_bytes(&mut v);
        v
    }

    pub fn record(&mut self, event: HygieneEvent) {
        if let Some(log) = self.log.as_mut() {
            log.push(event);
        }
    }

    pub fn events(&self) -> &[HygieneEvent] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn take_events(&mut self) -> Vec<HygieneEvent> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }
}

/// Owned buffer of key material that is overwritten when dropped.
#[derive(Default)]
pub struct SecretBuf(Vec<u8>);

impl SecretBuf {
    pub fn new(bytes: Vec<u8>) -> Self {
        SecretBuf(bytes)
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [u8] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn extend_from_slice(&mut self, bytes: &[u8]) {
        // Growing may reallocate and leave a stale copy behind; reserve first.
        if self.0.capacity() - self.0.len() < bytes.len() {
            let mut bigger = Vec::with_capacity((self.0.len() + bytes.len()).next_power_of_two());
            bigger.extend_from_slice(&self.0);
            scrub_in_place(&mut self.0);
            self.0 = bigger;
        }
        self.0.extend_from_slice(bytes);
    }
}

impl std::fmt::Debug for SecretBuf {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SecretBuf({} bytes)", self.0.len())
    }
}

impl Drop for SecretBuf {
    fn drop(&mut self) {
        scrub_in_place(&mut self.0);
    }
}

/// Overwrite a buffer with pseudorandom bytes from a thread-local generator.
pub(crate) fn scrub_in_place(buf: &mut [u8]) {
    if !buf.is_empty() {
        rand::thread_rng().fill_bytes(buf);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_scrubber_is_reproducible_and_not_zero() {
        let mut a = Scrubber::seeded(7);
        let mut b = Scrubber::seeded(7);
        let x = a.fresh(64);
        assert_eq!(x, b.fresh(64));
        assert!(x.iter().any(|&v| v != 0));
    }

    #[test]
    fn log_is_off_unless_requested() {
        let mut s = Scrubber::seeded(1);
        s.record(HygieneEvent::DatagramEmitted { len: 3 });
        assert!(s.events().is_empty());
        let mut s = Scrubber::seeded(1).with_log();
        s.record(HygieneEvent::DatagramEmitted { len: 3 });
        assert_eq!(s.events().len(), 1);
    }

    #[test]
    fn secret_buf_growth_keeps_content() {
        let mut b = SecretBuf::new(vec![1, 2, 3]);
        for i in 0..100u8 {
            b.extend_from_slice(&[i]);
        }
        assert_eq!(b.len(), 103);
        assert_eq!(&b.as_slice()[..4], &[1, 2, 3, 0]);
    }
}
