//! Seed derivation for independent, order-free replication streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Replication seed derived from `(base_seed, n, r)` only.
pub fn replication_seed(base_seed: u64, n: usize, r: usize) -> u64 {
    let a = splitmix64(base_seed);
    let b = splitmix64(a ^ (n as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93));
    splitmix64(b ^ (r as u64).wrapping_mul(0xA076_1D64_78BD_642F))
}

/// Derive a child seed for a named sub-stream (e.g. pair subsampling).
pub fn child_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ stream.wrapping_mul(0xE703_7ED1_A0B4_28DB))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
