//! Counter-based random streams.
//!
//! Every random draw in the simulator is keyed by `(seed, counter, index)`, so the
//! values an agent sees do not depend on iteration order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for draw number `counter` of item `index`.
pub fn stream(seed: u64, counter: u64, index: u64) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ counter) ^ index.rotate_left(32));
    ChaCha8Rng::seed_from_u64(key)
}

/// Derives a child seed for a named purpose, e.g. one seed per Monte Carlo trial.
pub fn derive_seed(seed: u64, purpose: u64) -> u64 {
    splitmix64(seed ^ splitmix64(purpose.wrapping_add(0xA5A5_A5A5)))
}
