//! Seed derivation. Every random stream is a pure function of a base seed
//! and a tuple of tags, so results never depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const ORACLE: u64 = 0x6f72_6163;
pub const TRAIN_DATA: u64 = 0x7472_6e64;
pub const HELDOUT_DATA: u64 = 0x686c_6474;
pub const FLIP: u64 = 0x666c_6970;
pub const INIT: u64 = 0x696e_6974;
pub const SHUFFLE: u64 = 0x7368_7566;
pub const DIFFUSION_DRAW: u64 = 0x6466_6472;
pub const EVAL_DRAW: u64 = 0x6576_616c;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_for(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = rng_for(7, &[ORACLE]).random();
        let b: u64 = rng_for(7, &[ORACLE]).random();
        let c: u64 = rng_for(7, &[FLIP]).random();
        let d: u64 = rng_for(8, &[ORACLE]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
    }
}
