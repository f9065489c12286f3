//! Keyed RNG substreams.
//!
//! Every random draw in a run is taken from a stream derived from the
//! master seed plus a path of integer keys (round, client, step, purpose).
//! Two streams with different key paths are statistically independent, and a
//! stream never depends on how work was scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Purpose tags mixed into stream keys.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const POISSON: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const DATA: u64 = 6;
    pub const MONTE_CARLO: u64 = 7;
    pub const PROBE: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a key path into a 64-bit seed.
pub fn derive_seed(master: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix64(master), |acc, &k| {
        splitmix64(acc ^ splitmix64(k))
    })
}

pub fn stream(master: u64, keys: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(master, keys))
}
