//! Deterministic random streams.
//!
//! Every randomized stage draws from a stream obtained here, keyed by the run
//! seed and a tag naming the consumer (`"occ/<sample_id>"`, `"init"`, ...).
//! Keying by tag rather than by call order keeps results independent of the
//! order in which parallel workers run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// FNV-1a over the tag bytes.
fn tag_hash(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Returns the stream for `(seed, stream_tag)`.
///
/// The seed selects the ChaCha key and the tag hash selects the stream
/// number, so distinct tags under one seed never share a keystream.
pub fn make_rng(seed: u64, stream_tag: &str) -> Stream {
    assert!(!stream_tag.is_empty(), "stream tag must be nonempty");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag_hash(stream_tag));
    rng
}
