//! Named random sub-streams derived from a single experiment seed.
//!
//! Every consumer of randomness (scene synthesis, sensor noise, training,
//! window sampling) draws from its own stream so that any one component can
//! be re-run in isolation and still reproduce the same draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const SCENE: &str = "scene";
pub const NOISE: &str = "noise";
pub const TRAINING: &str = "training";
pub const SAMPLING: &str = "sampling";
pub const INIT: &str = "init";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a 64-bit sub-seed from a root seed and a stream name.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    let mut h = splitmix64(seed);
    for b in stream.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    h
}

/// A ChaCha8 generator for the named sub-stream of `seed`.
pub fn stream(seed: u64, name: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, name))
}

/// A generator for the `index`-th member of a named family (e.g. one per round).
pub fn indexed_stream(seed: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(splitmix64(derive_seed(seed, name) ^ splitmix64(index)))
}
