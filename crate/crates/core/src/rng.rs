//! Seeded, task-keyed randomness.
//!
//! Every stochastic component derives its generator from a root seed plus a
//! string key and numeric indices, so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed`, a task label and an index.
pub fn derive_seed(seed: u64, key: &str, index: u64) -> u64 {
    let mut h = splitmix(seed);
    for b in key.bytes() {
        h = splitmix(h ^ b as u64);
    }
    splitmix(h ^ splitmix(index))
}

pub fn rng_for(seed: u64, key: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, key, index))
}
