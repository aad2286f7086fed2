//! Seed derivation so that every oracle draw is a pure function of its inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a list of keys into one seed. Order matters.
pub fn derive(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(mix(seed), |acc, k| mix(acc ^ mix(*k)))
}

pub fn rng(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, keys))
}

// Stream tags keep independent draws from colliding.
pub const TAG_DATASET: u64 = 0x01;
pub const TAG_DETECT: u64 = 0x02;
pub const TAG_FALSE_PROPOSAL: u64 = 0x03;
pub const TAG_FEATURE: u64 = 0x04;
pub const TAG_PROTOTYPE: u64 = 0x05;
pub const TAG_BACKGROUND: u64 = 0x06;
pub const TAG_SAMPLING: u64 = 0x07;
pub const TAG_ARRIVALS: u64 = 0x08;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_depends_on_order() {
        assert_ne!(derive(1, &[2, 3]), derive(1, &[3, 2]));
        assert_eq!(derive(1, &[2, 3]), derive(1, &[2, 3]));
    }
}
