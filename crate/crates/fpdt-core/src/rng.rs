//! Deterministic seed derivation.
//!
//! Every random stream in the pipeline is derived from the master seed plus
//! a list of role tags, so stages can run in parallel (or be resumed) while
//! producing bit-identical results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 step; a solid 64-bit mixer.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a root seed with a sequence of tags into one derived seed.
pub fn mix(root: u64, tags: &[u64]) -> u64 {
    let mut acc = splitmix(root);
    for &t in tags {
        acc = splitmix(acc ^ splitmix(t));
    }
    acc
}

/// Stable 64-bit hash of a role name (FNV-1a).
pub fn tag(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A ChaCha stream for `(root, tags...)`.
pub fn stream(root: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(root, tags))
}
