//! Splittable seed derivation.
//!
//! Every random stream in the crate is derived from one 64-bit master seed.
//! A derived seed is `mix(mix(master ^ tag_hash(tag)) + index)`, where `mix` is
//! the SplitMix64 finalizer and `tag_hash` is FNV-1a over the UTF-8 bytes of
//! the tag. Only integer arithmetic is involved, so the result is the same on
//! every platform, and sample `i` of a stream never depends on how many other
//! samples were drawn or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    tag.bytes().fold(0xCBF2_9CE4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Seed for element `index` of the stream named `tag`.
pub fn derive(master: u64, tag: &str, index: u64) -> u64 {
    mix(mix(master ^ tag_hash(tag)).wrapping_add(index))
}

pub fn rng(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tag, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_values() {
        // Pinned so a change to the derivation is caught; the corpus files
        // depend on it bit for bit.
        assert_eq!(mix(0), 0xE220_A839_7B1D_CDAF);
        assert_eq!(derive(7, "train", 0), derive(7, "train", 0));
        assert_ne!(derive(7, "train", 0), derive(7, "train", 1));
        assert_ne!(derive(7, "train", 0), derive(7, "aux", 0));
        assert_ne!(derive(7, "train", 0), derive(8, "train", 0));
    }
}
