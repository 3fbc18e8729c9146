//! Deterministic seed derivation. Every random stream in the crate is a
//! ChaCha8 generator keyed by a seed derived from `(base, labels...)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a base seed with a sequence of labels into a new 64-bit seed.
pub fn derive_seed(base: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(base), |acc, &l| splitmix64(acc ^ splitmix64(l)))
}

pub fn rng_from(base: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, labels))
}

/// Stream labels, kept distinct so different consumers never share a stream.
pub mod stream {
    pub const POINTS: u64 = 0x504f_494e;
    pub const TUPLES: u64 = 0x5455_504c;
    pub const ORACLE: u64 = 0x4f52_4143;
    pub const RESET: u64 = 0x5245_5345;
    pub const REWARD: u64 = 0x5245_5741;
    pub const GENERATE: u64 = 0x4745_4e45;
    pub const AGENT: u64 = 0x4147_454e;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_label_sensitive() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
    }
}
