//! Seeded randomness.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha::ChaCha8Rng`)
//! seeded through `SeedableRng::seed_from_u64`. Independent streams (per
//! epoch, per sample, per fold) get their seeds from [`derive_seed`], a
//! SplitMix64 fold over the base seed and the stream coordinates, so a stream
//! can be recreated without replaying the ones before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    stream
        .iter()
        .fold(splitmix64(base), |acc, &s| splitmix64(acc ^ splitmix64(s)))
}

pub fn derived(base: u64, stream: &[u64]) -> Rng {
    seeded(derive_seed(base, stream))
}
