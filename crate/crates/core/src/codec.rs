//! Packet encryption and authentication.
//!
//! A plaintext `P` of `n` bytes consumes `16 + n` fresh key bytes: the first
//! sixteen (`A`) key the header MAC, the next `n` (`K`) are XORed into the
//! tail. On the wire a data packet is `H || T` and its acknowledgement is `A`
//! sent back in the clear.
//!
//! ```text
//! T = P xor K
//! H = MD5(A || MD5(A || T))
//! C = H || T            (n + 16 bytes)
//! ACK = A               (16 bytes)
//! ```

use thiserror::Error;

use crate::hygiene::{HygieneEvent, Scrubber};
use crate::md5::Md5;

/// Header (MAC) length, also the MAC key length and the ACK length.
pub const HEADER_LEN: usize = 16;
/// Largest plaintext, type byte included.
pub const MAX_PLAINTEXT: usize = 1416;
/// Largest datagram the protocol ever emits.
pub const MAX_DATAGRAM: usize = HEADER_LEN + MAX_PLAINTEXT;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("plaintext must be 1..={MAX_PLAINTEXT} bytes, got {0}")]
    PlaintextLength(usize),
    #[error("key slice has {got} bytes, expected {want}")]
    SliceLengthMismatch { want: usize, got: usize },
    #[error("key slice was already consumed")]
    SliceAlreadyConsumed,
    #[error("datagram of {0} bytes is shorter than the header")]
    TooShort(usize),
}

/// Plaintext packet: one type byte followed by payload.
#[derive(Clone, PartialEq, Eq)]
pub struct PlaintextPacket(Vec<u8>);

impl PlaintextPacket {
    pub fn new(type_code: u8, payload: &[u8]) -> Result<Self, CodecError> {
        let mut bytes = Vec::with_capacity(1 + payload.len());
        bytes.push(type_code);
        bytes.extend_from_slice(payload);
        Self::from_bytes(bytes)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, CodecError> {
        if bytes.is_empty() || bytes.len() > MAX_PLAINTEXT {
            return Err(CodecError::PlaintextLength(bytes.len()));
        }
        Ok(PlaintextPacket(bytes))
    }

    pub fn type_code(&self) -> u8 {
        self.0[0]
    }

    pub fn payload(&self) -> &[u8] {
        &self.0[1..]
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl std::fmt::Debug for PlaintextPacket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PlaintextPacket(type={:#04x}, {} bytes)", self.0[0], self.0.len())
    }
}

impl Drop for PlaintextPacket {
    fn drop(&mut self) {
        crate::hygiene::scrub_in_place(&mut self.0);
    }
}

/// A run of never-used pad bytes, with where it came from.
pub struct KeySlice {
    pub pad_id: u32,
    pub page_no: u32,
    pub offset: u64,
    bytes: Vec<u8>,
    consumed: bool,
}

impl KeySlice {
    pub fn new(pad_id: u32, page_no: u32, offset: u64, bytes: Vec<u8>) -> Self {
        KeySlice {
            pad_id,
            page_no,
            offset,
            bytes,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn bytes(&self) -> Result<&[u8], CodecError> {
        if self.consumed {
            Err(CodecError::SliceAlreadyConsumed)
        } else {
            Ok(&self.bytes)
        }
    }

    /// Splits off the first `at` bytes as their own slice.
    pub fn split_front(mut self, at: usize) -> (KeySlice, KeySlice) {
        let rest = self.bytes.split_off(at);
        let front = KeySlice::new(self.pad_id, self.page_no, self.offset, std::mem::take(&mut self.bytes));
        let back = KeySlice::new(self.pad_id, self.page_no, self.offset + at as u64, rest);
        self.consumed = true;
        (front, back)
    }

    /// Overwrite the bytes and mark the slice spent.
    pub fn destroy(&mut self, scrub: &mut Scrubber) {
        scrub.overwrite(&mut self.bytes);
        self.consumed = true;
        scrub.record(HygieneEvent::KeyDestroyed {
            pad: self.pad_id,
            page: self.page_no,
            offset: self.offset,
        });
    }
}

impl std::fmt::Debug for KeySlice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeySlice")
            .field("pad_id", &self.pad_id)
            .field("page_no", &self.page_no)
            .field("offset", &self.offset)
            .field("len", &self.bytes.len())
            .field("consumed", &self.consumed)
            .finish()
    }
}

impl Drop for KeySlice {
    fn drop(&mut self) {
        if !self.consumed {
            crate::hygiene::scrub_in_place(&mut self.bytes);
        }
    }
}

/// Encrypted data packet as it travels: header then tail.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CiphertextPacket(Vec<u8>);

impl CiphertextPacket {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, CodecError> {
        if bytes.len() < HEADER_LEN {
            return Err(CodecError::TooShort(bytes.len()));
        }
        Ok(CiphertextPacket(bytes))
    }

    pub fn header(&self) -> [u8; HEADER_LEN] {
        self.0[..HEADER_LEN].try_into().expect("header length checked")
    }

    pub fn tail(&self) -> &[u8] {
        &self.0[HEADER_LEN..]
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// `MD5(A || MD5(A || T))`, raw catenation with the key first in both passes.
#[cfg(not(feature = "rfc2104-hmac"))]
pub fn hmac_header(a: &[u8; HEADER_LEN], tail: &[u8]) -> [u8; HEADER_LEN] {
    let mut inner = Md5::new();
    inner.update(a);
    inner.update(tail);
    let inner = inner.finalize();
    let mut outer = Md5::new();
    outer.update(a);
    outer.update(&inner);
    outer.finalize()
}

/// RFC 2104 HMAC-MD5 keyed by `A`.
#[cfg(feature = "rfc2104-hmac")]
pub fn hmac_header(a: &[u8; HEADER_LEN], tail: &[u8]) -> [u8; HEADER_LEN] {
    let mut ipad = [0x36u8; 64];
    let mut opad = [0x5cu8; 64];
    for i in 0..HEADER_LEN {
        ipad[i] ^= a[i];
        opad[i] ^= a[i];
    }
    let mut inner = Md5::new();
    inner.update(&ipad);
    inner.update(tail);
    let inner = inner.finalize();
    let mut outer = Md5::new();
    outer.update(&opad);
    outer.update(&inner);
    outer.finalize()
}

/// Encrypt `plain` with MAC key `a` and pad bytes `k`.
///
/// Both slices are destroyed on success. Returns the datagram and the bytes
/// the receiver will send back as its acknowledgement.
pub fn encrypt_packet(
    plain: &PlaintextPacket,
    a: &mut KeySlice,
    k: &mut KeySlice,
    scrub: &mut Scrubber,
) -> Result<(CiphertextPacket, [u8; HEADER_LEN]), CodecError> {
    let mac_key: [u8; HEADER_LEN] = a
        .bytes()?
        .try_into()
        .map_err(|_| CodecError::SliceLengthMismatch { want: HEADER_LEN, got: a.len() })?;
    let pad = k.bytes()?;
    if pad.len() != plain.len() {
        return Err(CodecError::SliceLengthMismatch { want: plain.len(), got: pad.len() });
    }
    let mut out = vec![0u8; HEADER_LEN + plain.len()];
    for ((dst, p), key) in out[HEADER_LEN..].iter_mut().zip(plain.as_bytes()).zip(pad) {
        *dst = p ^ key;
    }
    let header = hmac_header(&mac_key, &out[HEADER_LEN..]);
    out[..HEADER_LEN].copy_from_slice(&header);
    k.destroy(scrub);
    a.destroy(scrub);
    Ok((CiphertextPacket(out), mac_key))
}

/// Check `datagram` against candidate key bytes without consuming anything.
///
/// `k` must hold at least `datagram.len() - 16` bytes. Returns `Ok(None)` when
/// the header does not authenticate, and also for a header-only datagram,
/// which cannot carry the mandatory type byte.
pub fn try_decrypt(
    datagram: &[u8],
    a: &[u8; HEADER_LEN],
    k: &[u8],
) -> Result<Option<PlaintextPacket>, CodecError> {
    if datagram.len() < HEADER_LEN {
        return Err(CodecError::TooShort(datagram.len()));
    }
    let (header, tail) = datagram.split_at(HEADER_LEN);
    if k.len() < tail.len() {
        return Err(CodecError::SliceLengthMismatch { want: tail.len(), got: k.len() });
    }
    if !ct_eq(&hmac_header(a, tail), header) || tail.is_empty() || tail.len() > MAX_PLAINTEXT {
        return Ok(None);
    }
    let plain: Vec<u8> = tail.iter().zip(k).map(|(t, key)| t ^ key).collect();
    PlaintextPacket::from_bytes(plain).map(Some)
}

fn ct_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slice(bytes: &[u8]) -> KeySlice {
        KeySlice::new(1, 0, 0, bytes.to_vec())
    }

    #[test]
    fn chat_yes_is_twenty_bytes_and_no_is_nineteen() {
        let mut scrub = Scrubber::seeded(0);
        for (text, want) in [("yes", 20), ("no", 19)] {
            let p = PlaintextPacket::new(0x01, text.as_bytes()).unwrap();
            let (c, ack) = encrypt_packet(&p, &mut slice(&[9; 16]), &mut slice(&vec![3; p.len()]), &mut scrub)
                .unwrap();
            assert_eq!(c.len(), want);
            assert_eq!(ack.len(), 16);
        }
    }

    #[test]
    fn zero_key_leaves_tail_equal_to_plaintext() {
        let mut scrub = Scrubber::seeded(0);
        let p = PlaintextPacket::new(0x01, b"hello").unwrap();
        let (c, _) = encrypt_packet(&p, &mut slice(&[1; 16]), &mut slice(&[0; 6]), &mut scrub).unwrap();
        assert_eq!(c.tail(), p.as_bytes());
    }

    #[test]
    fn empty_tail_collapses_to_md5_of_key() {
        let a = [0x42u8; 16];
        let inner = crate::md5::md5(&a);
        let mut outer = a.to_vec();
        outer.extend_from_slice(&inner);
        assert_eq!(hmac_header(&a, b""), crate::md5::md5(&outer));
    }

    #[test]
    fn slices_are_destroyed_and_cannot_be_reused() {
        let mut scrub = Scrubber::seeded(0);
        let p = PlaintextPacket::new(0x01, b"x").unwrap();
        let mut a = slice(&[5; 16]);
        let mut k = slice(&[6; 2]);
        encrypt_packet(&p, &mut a, &mut k, &mut scrub).unwrap();
        assert!(a.is_consumed() && k.is_consumed());
        assert_eq!(
            encrypt_packet(&p, &mut a, &mut k, &mut scrub).unwrap_err(),
            CodecError::SliceAlreadyConsumed
        );
    }

    #[test]
    fn length_mismatch_is_rejected_before_consumption() {
        let mut scrub = Scrubber::seeded(0);
        let p = PlaintextPacket::new(0x01, b"abc").unwrap();
        let mut a = slice(&[5; 16]);
        let mut k = slice(&[6; 3]);
        let err = encrypt_packet(&p, &mut a, &mut k, &mut scrub).unwrap_err();
        assert_eq!(err, CodecError::SliceLengthMismatch { want: 4, got: 3 });
        assert!(!a.is_consumed() && !k.is_consumed());
        let mut short_a = slice(&[5; 15]);
        let mut k = slice(&[6; 4]);
        assert!(matches!(
            encrypt_packet(&p, &mut short_a, &mut k, &mut scrub),
            Err(CodecError::SliceLengthMismatch { want: 16, got: 15 })
        ));
    }

    #[test]
    fn plaintext_bounds() {
        assert!(PlaintextPacket::from_bytes(vec![]).is_err());
        assert!(PlaintextPacket::from_bytes(vec![0; MAX_PLAINTEXT]).is_ok());
        assert_eq!(
            PlaintextPacket::from_bytes(vec![0; MAX_PLAINTEXT + 1]).unwrap_err(),
            CodecError::PlaintextLength(MAX_PLAINTEXT + 1)
        );
    }

    #[test]
    fn short_datagram_is_too_short() {
        assert_eq!(try_decrypt(&[0; 15], &[0; 16], &[]).unwrap_err(), CodecError::TooShort(15));
    }

    #[test]
    fn header_mac_is_not_symmetric() {
        let a = [1u8; 16];
        let t = [2u8; 16];
        assert_ne!(hmac_header(&a, &t), hmac_header(&t, &a));
    }

    #[test]
    fn every_single_bit_flip_of_a_twenty_byte_packet_is_rejected() {
        let mut scrub = Scrubber::seeded(0);
        let a = [0x11u8; 16];
        let k = [0x22u8; 4];
        let p = PlaintextPacket::new(0x01, b"yes").unwrap();
        let (c, _) = encrypt_packet(&p, &mut slice(&a), &mut slice(&k), &mut scrub).unwrap();
        let mut accepted = 0;
        for bit in 0..c.len() * 8 {
            let mut forged = c.as_bytes().to_vec();
            forged[bit / 8] ^= 1 << (bit % 8);
            if try_decrypt(&forged, &a, &k).unwrap().is_some() {
                accepted += 1;
            }
        }
        assert_eq!(accepted, 0);
        assert_eq!(try_decrypt(c.as_bytes(), &a, &k).unwrap().unwrap(), p);
    }
}
