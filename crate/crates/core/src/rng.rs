//! Deterministic, order-independent random streams.
//!
//! Every consumer derives its generator from `(seed, domain, index)`, so
//! replicate `b` draws the same numbers no matter which thread runs it or in
//! which order replicates are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Bootstrap replicates.
pub const DOMAIN_BOOTSTRAP: u64 = 0xB007;
/// Simulated data sets.
pub const DOMAIN_DATA: u64 = 0xDA7A;
/// Per-replicate test seeds inside a simulation.
pub const DOMAIN_TEST_SEED: u64 = 0x7E57;

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(domain)));
    rng.set_stream(index);
    rng
}

/// A derived 64-bit seed, for handing to code that takes a plain seed.
pub fn derive_seed(seed: u64, domain: u64, index: u64) -> u64 {
    mix(mix(seed ^ mix(domain)).wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}
