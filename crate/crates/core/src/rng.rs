//! Seed derivation.
//!
//! Every random stream in the pipeline is a ChaCha8 generator seeded from the
//! root seed and a path of integers (stage tag, image id, step, ...). Streams
//! for different paths are independent, so work can be split across threads
//! without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Stream tags. Each stage draws from its own subtree of the root seed.
pub mod tag {
    pub const SEGMENT: u64 = 0x5345_474d;
    pub const ENCODER: u64 = 0x454e_4344;
    pub const TRAIN: u64 = 0x5452_4149;
    pub const INIT: u64 = 0x494e_4954;
    pub const GLOBAL_VIEW: u64 = 0x474c_4f42;
    pub const ROI_VIEW: u64 = 0x524f_4956;
    pub const BATCH: u64 = 0x4241_5443;
    pub const SYNTHETIC: u64 = 0x5359_4e54;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `path` into `root`, giving a well-mixed 64-bit seed.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(root: u64, path: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(root, path))
}
