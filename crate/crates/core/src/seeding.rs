//! Named random substreams derived from a single run seed.
//!
//! Every source of randomness in a run (augmentation, init, shuffle,
//! dropout, simulation) draws from its own ChaCha stream keyed by
//! `(seed, name)`, so components can be re-seeded independently and
//! parallel/serial execution orders agree.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit mix of the run seed and a stream label (FNV-1a over the
/// label, folded with the seed via splitmix64).
fn mix(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Substream for a named component of the run.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, name))
}

/// Substream keyed by a name plus an integer (epoch, cell index, ...).
pub fn indexed_stream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed, name), &index.to_string()))
}

/// Per-instance substream keyed by the instance id, so per-instance work
/// can fan out without changing results.
pub fn instance_stream(seed: u64, name: &str, id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed, name), id))
}
