//! Deterministic named RNG streams.
//!
//! Every randomized stage derives its own ChaCha stream from the run seed, a
//! domain label, and an index, so reordering or adding stages never perturbs
//! the draws of another stage.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive an independent stream for `(seed, domain, index)`.
pub fn stream(seed: u64, domain: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(domain.as_bytes()) ^ index.wrapping_mul(0x9e3779b97f4a7c15));
    rng
}
