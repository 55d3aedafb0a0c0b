//! Deterministic named RNG substreams derived from a single root seed.
//!
//! Every random draw in the pipeline comes from `substream(root, label)` or
//! `substream_indexed` so that runs are reproducible bit-for-bit from one
//! seed and independent stages cannot perturb each other's streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(label: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1_0000_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG for the stage named `label` under the given root seed.
pub fn substream(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(root ^ fnv1a(label)))
}

/// Seed (not RNG) for numbered substreams, e.g. one per task.
pub fn substream_seed(root: u64, label: &str, index: u64) -> u64 {
    splitmix(splitmix(root ^ fnv1a(label)) ^ index)
}
