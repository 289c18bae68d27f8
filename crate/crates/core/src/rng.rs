//! Seed derivation. Every random draw in the crate comes from a ChaCha stream
//! keyed by `(base seed, tags...)`, so results never depend on call order or
//! thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

// Stream tags, so that e.g. dictionary seed 3 and signal seed 3 do not collide.
pub(crate) const TAG_DICT: u64 = 0xd1c7;
pub(crate) const TAG_SIGNAL: u64 = 0x5167;
pub(crate) const TAG_NOISE: u64 = 0x4015e;
pub(crate) const TAG_TRAIN: u64 = 0x7a1;
pub(crate) const TAG_VALID: u64 = 0x7a11d;
pub(crate) const TAG_TEST: u64 = 0x7e57;
pub(crate) const TAG_RIG: u64 = 0x41c;
pub(crate) const TAG_SCENE: u64 = 0x5ce7e;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn tags_separate_streams() {
        assert_ne!(derive_seed(3, &[TAG_DICT]), derive_seed(3, &[TAG_SIGNAL]));
        assert_ne!(derive_seed(3, &[1, 2]), derive_seed(3, &[2, 1]));
        let a: u64 = rng_for(9, &[1]).random();
        let b: u64 = rng_for(9, &[1]).random();
        assert_eq!(a, b);
    }
}
