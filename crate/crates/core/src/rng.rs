//! Named random substreams derived from one seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream names used across the crate.
pub const INIT: &str = "init";
pub const TRAINING: &str = "training";
pub const EVAL: &str = "eval";
pub const DATA: &str = "data";

/// A fresh `u64` seed for `name` under `seed`, for APIs that take a seed
/// rather than a generator.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    use rand::Rng;
    substream(seed, name).random()
}

/// A generator for `name` under `seed`; distinct names give independent
/// ChaCha streams with the same key.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}
