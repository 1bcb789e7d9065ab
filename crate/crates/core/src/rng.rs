//! Deterministic seed tree over ChaCha20 streams.
//!
//! Every random draw in the crate comes from a ChaCha20 generator keyed by a
//! master seed and a path of integers (replication index, grid index, chain
//! index, ...). The path selects the 64-bit ChaCha stream, so sibling streams
//! never overlap and results do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type Rng = ChaCha20Rng;

/// Stream tags for the top level of the tree.
pub mod tag {
    pub const PRETEST: u64 = 1;
    pub const SAMPLER: u64 = 2;
    pub const DGP: u64 = 3;
    pub const ORACLE: u64 = 4;
    pub const LASSO: u64 = 5;
    pub const TUNING: u64 = 6;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a path of integers into a single stream id.
pub fn path_key(path: &[u64]) -> u64 {
    path.iter()
        .fold(0x2545_f491_4f6c_dd1d, |acc, &x| splitmix(acc ^ splitmix(x)))
}

/// Generator for `(seed, path)`.
pub fn substream(seed: u64, path: &[u64]) -> Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(path_key(path));
    rng
}

/// Child seed for handing a whole subtree to another component.
pub fn child_seed(seed: u64, path: &[u64]) -> u64 {
    splitmix(seed ^ path_key(path))
}
