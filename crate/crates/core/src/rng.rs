//! Counter-based random streams.
//!
//! Every random decision is drawn from a ChaCha stream addressed by
//! `(seed, domain, index)`, so the value a node or step sees never depends
//! on how work was scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent purposes that consume randomness from the same user seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    EdgeSampling = 1,
    Generator = 2,
    Init = 3,
    Minibatch = 4,
    Noise = 5,
    Calibration = 6,
    Verify = 7,
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for `index` within `domain`. Streams for distinct `(domain, index)`
/// pairs are non-overlapping ChaCha streams under the same key.
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(domain as u64)));
    rng.set_stream(index);
    rng
}
