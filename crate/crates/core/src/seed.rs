//! Deterministic seed streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a global seed with a stream tag and an index into an independent seed.
pub fn derive(global: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(global ^ splitmix64(stream)) ^ index)
}

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(global: u64, stream: u64, index: u64) -> SeededRng {
    rng(derive(global, stream, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ() {
        assert_ne!(derive(0, 1, 0), derive(0, 2, 0));
        assert_ne!(derive(0, 1, 0), derive(0, 1, 1));
        assert_eq!(derive(7, 1, 3), derive(7, 1, 3));
    }
}
