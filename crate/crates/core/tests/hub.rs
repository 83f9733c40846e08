mod common;

use common::*;

#[test]
fn distribution_then_peer_to_peer() {
    let tmp = tempfile::tempdir().unwrap();
    let r = distribution_run(tmp.path());
    assert_eq!(r.reserve_bytes, r.reserve_expected);
    assert_eq!(r.reserve_bytes, 320 * 1024);
    assert!(r.done);
    assert_eq!(r.carved_bytes, r.pages as u64 * r.kb as u64 * 1024);
    assert!(r.remotes_are_peers);
    assert!(r.peer_connected);
    assert!(r.chat_arrived);
    assert!(r.file_identical);
    assert_eq!(r.hub_saw, 0);
    assert_eq!(r.overlaps, 0);
}
