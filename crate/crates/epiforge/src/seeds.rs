//! Deterministic derivation of independent RNG streams.
//!
//! Every randomized stage derives its generator from `(seed, tags...)` so that
//! any unit of work — one episode, one image augmentation, one holdout split —
//! is reproducible in isolation and never shares a stream with its neighbors.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keeping unrelated consumers of the same user seed apart.
pub mod domain {
    pub const SYNTHETIC: u64 = 0x5947_4E54_4553_0001;
    pub const EPISODE: u64 = 0x5947_4E54_4553_0002;
    pub const TEST_TASK: u64 = 0x5947_4E54_4553_0003;
    pub const AUGMENT: u64 = 0x5947_4E54_4553_0004;
    pub const INIT: u64 = 0x5947_4E54_4553_0005;
    pub const HOLDOUT: u64 = 0x5947_4E54_4553_0006;
}

/// splitmix64 finalizer; full-avalanche mixing of a 64-bit word.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold a sequence of tags into a seed, one mixing round per tag.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    let mut acc = splitmix(seed);
    for &t in tags {
        acc = splitmix(acc ^ splitmix(t));
    }
    acc
}

/// Counter-based stream: equal `(seed, tags)` always yields an identical
/// generator, and distinct tag paths yield statistically independent ones.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn equal_paths_give_equal_streams() {
        let mut a = stream(7, &[domain::EPISODE, 3]);
        let mut b = stream(7, &[domain::EPISODE, 3]);
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn sibling_streams_differ() {
        let mut a = stream(7, &[domain::EPISODE, 3]);
        let mut b = stream(7, &[domain::EPISODE, 4]);
        let mut c = stream(7, &[domain::AUGMENT, 3]);
        let x = a.next_u64();
        assert_ne!(x, b.next_u64());
        assert_ne!(x, c.next_u64());
    }

    #[test]
    fn derive_is_order_sensitive() {
        assert_ne!(derive(1, &[2, 3]), derive(1, &[3, 2]));
    }
}
