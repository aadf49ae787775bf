//! Seed derivation. Every stochastic stage gets its own ChaCha stream derived
//! from a root seed and a counter, so shards can be produced in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StageRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `index` under `root`.
pub fn derive_seed(root: u64, index: u64) -> u64 {
    splitmix64(splitmix64(root) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

/// Child seed for a labelled sub-stream (e.g. "noise", "events").
pub fn derive_stream(root: u64, label: &str) -> u64 {
    label
        .bytes()
        .fold(splitmix64(root), |acc, b| splitmix64(acc ^ u64::from(b)))
}

pub fn rng(seed: u64) -> StageRng {
    ChaCha8Rng::seed_from_u64(seed)
}
