//! Deterministic named RNG streams.
//!
//! Every source of randomness in the engine derives from one root seed plus a
//! stream name, so independent subsystems (scene placement, tier assignment,
//! weight init, epoch shuffling) never perturb each other's draws.

use rand_chacha::ChaCha8Rng;
use rand::{Rng, SeedableRng};

/// FNV-1a over the root seed and the stream name.
pub fn derive(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(name.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A ChaCha stream keyed by `(seed, name)`. Portable across platforms.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, name))
}

/// Standard normal draw via Box-Muller; keeps the dataset format independent
/// of distribution-crate sampling internals.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
