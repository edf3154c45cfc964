//! Seed derivation. Every stochastic step takes its own generator seeded from
//! `(run seed, tag, id)` so that results do not depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable across platforms and releases (FNV-1a over the tag, then mixed).
pub fn derive_seed(seed: u64, tag: &str, id: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(splitmix64(seed ^ h).wrapping_add(id))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_tag_and_id() {
        let a = derive_seed(7, "bart", 0);
        assert_eq!(a, derive_seed(7, "bart", 0));
        assert_ne!(a, derive_seed(7, "bart", 1));
        assert_ne!(a, derive_seed(7, "cfr", 0));
        assert_ne!(a, derive_seed(8, "bart", 0));
    }
}
