//! Splitting bulk sends into datagram-sized pieces.

/// Chunks shorter than this are merged with their predecessor and the pair
/// split evenly.
pub const REBALANCE_BELOW: usize = 64;

/// Lengths of the pieces `total` bytes are cut into, each at most `max`.
///
/// A short final piece is avoided: when the last piece would be under
/// [`REBALANCE_BELOW`] bytes, the last two become `ceil(r/2)` and `floor(r/2)`
/// of their combined length `r`.
pub fn chunk_lengths(total: usize, max: usize) -> Vec<usize> {
    assert!(max > 0, "chunk size must be positive");
    if total == 0 {
        return Vec::new();
    }
    let mut out = vec![max; total / max];
    let rest = total % max;
    if rest > 0 {
        out.push(rest);
    }
    let n = out.len();
    if n >= 2 && out[n - 1] < REBALANCE_BELOW {
        let r = out[n - 2] + out[n - 1];
        out[n - 2] = r.div_ceil(2);
        out[n - 1] = r / 2;
    }
    out
}
