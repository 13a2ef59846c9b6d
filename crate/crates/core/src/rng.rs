//! Seed derivation.
//!
//! Every random draw in the toolkit comes from one root seed split into
//! named sub-streams, so two runs that differ in one factor share all
//! other randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named sub-streams of the root seed.
pub mod stream {
    pub const INIT: &str = "init";
    pub const DATA: &str = "data";
    pub const MASKING: &str = "masking";
    pub const DROPOUT: &str = "dropout";
    pub const TRANSFER: &str = "transfer";
    pub const PROBE: &str = "probe";
    pub const CORPUS: &str = "corpus";
    pub const EVAL: &str = "eval";
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed of the sub-stream `name` under `root`.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    splitmix64(root ^ splitmix64(fnv1a(name)))
}

/// RNG for sub-stream `name`.
pub fn named(root: u64, name: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(root, name))
}

/// Counter-keyed RNG: the same `(seed, key)` always yields the same stream,
/// independent of how many other keys were drawn before it.
pub fn keyed(seed: u64, key: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}

/// Key combining two counters, e.g. (step, example index).
pub fn pair_key(a: u64, b: u64) -> u64 {
    splitmix64(a.wrapping_mul(0x100_0000_01b3) ^ splitmix64(b))
}
