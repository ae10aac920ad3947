//! Counter-based random streams.
//!
//! Every simulated path draws from its own ChaCha8 stream keyed by
//! `(seed, path_index)`, so a batch produces the same numbers no matter how
//! the paths are scheduled across worker threads. Sub-seeds for independent
//! phases of a run (search iterations, estimation, bisection steps) are
//! derived with [`derive_seed`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type PathRng = ChaCha8Rng;

/// Stream for one path.
pub fn path_rng(seed: u64, path_index: u64) -> PathRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    mix(mix(seed.wrapping_add(0x9e37_79b9_7f4a_7c15)) ^ label.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

/// Stable 64-bit label for a phase name, so call sites can write
/// `derive_seed(seed, label("stage2"))`.
pub fn label(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
