//! Deterministic stream derivation.
//!
//! Every random stream in the crate is keyed by `(master_seed, tag, index)`
//! so results do not depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream tags. Distinct purposes never share a stream.
pub mod tag {
    pub const GRAPH: u64 = 0x6772_6170;
    pub const LIFT: u64 = 0x6c69_6674;
    pub const EVOLVE: u64 = 0x6576_6f6c;
    pub const ANNEAL: u64 = 0x616e_6e6c;
    pub const ESCAPE: u64 = 0x6573_6370;
    pub const SURROGATE: u64 = 0x7375_7267;
    pub const ORACLE: u64 = 0x6f72_636c;
    pub const CONTINUATION: u64 = 0x636f_6e74;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a master seed with a tag and an index into a sub-seed.
pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ tag) ^ index)
}

pub fn stream(master: u64, tag: u64, index: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, tag, index))
}
