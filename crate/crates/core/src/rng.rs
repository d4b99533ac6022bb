//! Deterministic random substreams.
//!
//! Every outer sample draws from its own ChaCha stream derived from
//! `(seed, purpose, level, index)`, so results do not depend on how work is
//! scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RandomStream = ChaCha8Rng;

/// What a substream is used for; keeps pilot and production draws disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Sample = 0,
    Pilot = 1,
    Variance = 2,
    /// Fixed stream for proposal normalization.
    Truncation = 3,
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn substream(seed: u64, kind: StreamKind, level: usize, index: u64) -> RandomStream {
    let key = mix(seed ^ mix(kind as u64 + 1));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(mix(((level as u64) << 40) ^ index));
    rng
}
