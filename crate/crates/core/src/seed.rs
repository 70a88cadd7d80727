//! Derivation of independent random streams from the single run seed.
//!
//! Each consumer mixes the run seed with a domain constant and its own
//! indices through SplitMix64, then seeds a ChaCha8 generator with the result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DOMAIN_INIT: u64 = 1;
pub const DOMAIN_ORDER: u64 = 2;
pub const DOMAIN_SPLIT: u64 = 3;
pub const DOMAIN_PARTITION: u64 = 4;
pub const DOMAIN_SYNTH: u64 = 5;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, parts))
}
