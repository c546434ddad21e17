//! Deterministic derivation of sub-seeds from a master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes `salt` into `seed` (splitmix64 finalizer).
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, salt))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn salts_give_distinct_streams() {
        assert_ne!(mix_seed(1, 0), mix_seed(1, 1));
        assert_ne!(mix_seed(1, 0), mix_seed(2, 0));
        assert_eq!(mix_seed(5, 9), mix_seed(5, 9));
    }
}
