//! Seed derivation. Every random stream in a run is keyed off the master
//! seed plus a path of integer tags, so streams never depend on the order in
//! which other streams were consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `master` and a tag path.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |acc, &tag| {
        splitmix64(acc.rotate_left(23) ^ splitmix64(tag ^ 0xD1B5_4A32_D192_ED03))
    })
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// Stream tags.
pub(crate) const TAG_INIT: u64 = 1;
pub(crate) const TAG_TRAIN: u64 = 2;
pub(crate) const TAG_BAG: u64 = 3;
pub(crate) const TAG_PHASE2: u64 = 5;
pub(crate) const TAG_DATASET: u64 = 6;
pub(crate) const TAG_ACQUIRE: u64 = 7;
pub(crate) const TAG_LABEL: u64 = 8;
pub(crate) const TAG_ITERATION: u64 = 9;
pub(crate) const TAG_PREDICT: u64 = 10;
