//! Seed derivation for independent random streams.
//!
//! Every stream is a pure function of the run seed and a short path such as
//! `(stage, epoch, purpose)`, so adding a stage or resuming mid-run never
//! shifts the draws of any other stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. The discriminant enters the seed mix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    WeightInit = 1,
    AlphaInit = 2,
    BatchOrder = 3,
    Dropout = 4,
    Split = 5,
    Synth = 6,
    Augment = 7,
    Subset = 8,
    Genotype = 9,
    EvalBatchOrder = 10,
    DropPath = 11,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `seed` with `path` into a new 64-bit seed.
pub fn derive_seed(seed: u64, purpose: Purpose, path: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ 0x5044_4152_5453);
    h = splitmix(h ^ purpose as u64);
    for &p in path {
        h = splitmix(h ^ p);
    }
    h
}

pub fn stream(seed: u64, purpose: Purpose, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, path))
}
