//! Deterministic RNG substream derivation.
//!
//! Every source of randomness in this crate draws from a `ChaCha8Rng` seeded
//! through [`derive_seed`], which mixes a master seed, a domain label and an
//! index with a splitmix64 finalizer. Substreams are therefore independent of
//! execution order and thread count: the same `(master, domain, index)` triple
//! always yields the same stream.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `(master, domain, index)`.
pub fn derive_seed(master: u64, domain: &str, index: u64) -> u64 {
    let mut h = splitmix64(master);
    for &byte in domain.as_bytes() {
        h = splitmix64(h ^ u64::from(byte));
    }
    splitmix64(h ^ index)
}

/// A ChaCha stream for the given substream coordinates.
pub fn substream(master: u64, domain: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, domain, index))
}

/// Standard normal draw via Box-Muller (cosine branch only, so exactly two
/// uniforms are consumed per draw regardless of the value).
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
