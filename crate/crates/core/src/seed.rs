//! Seed splitting.
//!
//! Every stochastic choice draws from a `ChaCha8Rng` whose seed is derived
//! from one master seed:
//!
//! ```text
//! derive(seed, label) = splitmix64(seed ^ fnv1a64(label))
//! derive_indexed(seed, label, i) = derive(derive(seed, label), i-th splitmix step)
//! ```
//!
//! Labels are short stream names ("init", "proxy", "candidate", ...) or
//! parameter paths, so two streams never share a generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a64(label: &str) -> u64 {
    label
        .bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Child seed for a named stream.
pub fn derive(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ fnv1a64(label))
}

/// Child seed for the `index`-th member of a named stream.
pub fn derive_indexed(seed: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive(seed, label) ^ splitmix64(index))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_distinct() {
        assert_ne!(derive(7, "init"), derive(7, "proxy"));
        assert_ne!(derive_indexed(7, "rep", 0), derive_indexed(7, "rep", 1));
        assert_eq!(derive_indexed(7, "rep", 3), derive_indexed(7, "rep", 3));
    }
}
