//! Counter-based seed streams.
//!
//! Every random draw in the crate comes from a `ChaCha8Rng` seeded by
//! [`derive_seed`] from one root seed plus a tag path, so a run is
//! reproducible from a single integer no matter how work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod tag {
    pub const TRAIN: u64 = 1;
    pub const ICA: u64 = 2;
    pub const MONTE_CARLO: u64 = 3;
    pub const DATA: u64 = 4;
    pub const FOLDS: u64 = 5;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a root seed with a path of tags into an independent child seed.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, t| splitmix64(acc ^ splitmix64(*t)))
}

/// Stable 64-bit key for a name (FNV-1a).
pub fn name_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn stream(root: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, path))
}
