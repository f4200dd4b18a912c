//! Deterministic random streams derived from a single run seed.
//!
//! Every stochastic site (init, token noise, dropout, jitter) draws from its
//! own stream keyed by the run seed plus integer tags, so results do not
//! depend on evaluation order, worker count, or how often other sites draw.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Keeping them in one place avoids accidental collisions.
pub mod domain {
    pub const PARAM_INIT: u64 = 1;
    pub const TOKEN_PROJECTION: u64 = 2;
    pub const TOKEN_NOISE: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const GAUSSIAN_JITTER: u64 = 5;
    pub const SELFTEST: u64 = 6;
}

/// One splitmix64 step; the standard finalizer keeps nearby keys uncorrelated.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a tag into a seed. Chain calls to key a stream by several tags.
pub fn mix(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// Seed for a (domain, index) stream of a run.
pub fn stream_seed(run_seed: u64, domain: u64, index: u64) -> u64 {
    mix(mix(run_seed, domain), index)
}

pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Hash of a parameter name, used to give each parameter its own init
/// stream regardless of registration order. FNV-1a.
pub fn name_tag(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}
