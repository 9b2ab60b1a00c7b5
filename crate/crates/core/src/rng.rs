//! Named random substreams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DATAGEN: &str = "datagen";
pub const TRAIN: &str = "train";
pub const EVAL: &str = "eval";

/// Seed of the substream `name`, stable across platforms and releases.
pub fn substream_seed(root: u64, name: &str) -> u64 {
    // FNV-1a over the name, folded into the root with a splitmix64 finalizer
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(root ^ splitmix(h))
}

/// Seed for item `index` of a substream, e.g. one dataset per task.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    splitmix(seed.wrapping_add(splitmix(index.wrapping_add(0x9e37_79b9_7f4a_7c15))))
}

pub fn substream(root: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(root, name))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
