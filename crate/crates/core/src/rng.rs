//! Seed expansion into independent, reproducible random streams.
//!
//! A stream is addressed by the global seed plus a short key path such as
//! `[tag::MCPROP, network, layer]`. The path is folded into a single 64-bit
//! value with SplitMix64:
//!
//! ```text
//! h0 = splitmix64(seed)
//! h_{i+1} = splitmix64(h_i ^ splitmix64(key_i + 0x9E3779B97F4A7C15 * (i + 1)))
//! ```
//!
//! and the result seeds a ChaCha8 generator. Work units that own distinct key
//! paths draw from unrelated streams, so the same numbers come out whatever
//! order (or thread) the units run on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Domain tags for the first key of a stream path.
pub mod tag {
    pub const LAYER: u64 = 1;
    pub const MCPROP_INPUTS: u64 = 2;
    pub const MCPROP_LAYER: u64 = 3;
    pub const DEADNODE_INPUTS: u64 = 4;
    pub const DEADNODE_LAYER: u64 = 5;
    pub const TEACHER: u64 = 6;
    pub const DATA_TRAIN: u64 = 7;
    pub const DATA_VAL: u64 = 8;
    pub const STUDENT: u64 = 9;
    pub const SHUFFLE: u64 = 10;
    pub const VALIDATE: u64 = 11;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Folds a key path into a 64-bit sub-seed.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().enumerate().fold(splitmix64(seed), |h, (i, &key)| {
        splitmix64(h ^ splitmix64(key.wrapping_add(GOLDEN.wrapping_mul(i as u64 + 1))))
    })
}

pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive(seed, path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_path_same_stream() {
        let a: Vec<u64> = stream(7, &[1, 2, 3]).random_iter().take(8).collect();
        let b: Vec<u64> = stream(7, &[1, 2, 3]).random_iter().take(8).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn paths_are_order_sensitive() {
        assert_ne!(derive(7, &[1, 2]), derive(7, &[2, 1]));
        assert_ne!(derive(7, &[1]), derive(7, &[1, 0]));
        assert_ne!(derive(7, &[]), derive(8, &[]));
    }
}
