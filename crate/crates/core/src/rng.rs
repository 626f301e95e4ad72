//! Deterministic seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded from a base
//! seed mixed with a tag path (task index, entity id, fact index, ...). Work
//! items therefore own independent streams and results do not depend on how
//! items are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `base`, order-sensitively.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix(base), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn stream(base: u64, tags: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Stream domain tags, kept distinct so that e.g. prompt sampling and
/// diffusion noise for the same entity never share a stream.
pub mod tag {
    pub const SPLIT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const PROMPT: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const DM_TRAIN: u64 = 5;
    pub const ER: u64 = 6;
    pub const ABLATION_HP: u64 = 7;
    pub const TOY: u64 = 8;
    pub const DM_EVAL: u64 = 9;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn tags_are_order_sensitive() {
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
    }

    #[test]
    fn streams_are_reproducible() {
        let a: Vec<u32> = stream(3, &[9]).random_iter().take(4).collect();
        let b: Vec<u32> = stream(3, &[9]).random_iter().take(4).collect();
        assert_eq!(a, b);
    }
}
