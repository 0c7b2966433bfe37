//! Counter-based random streams.
//!
//! A stream is a pure function of a run seed and a tuple of counters such as
//! `(epoch, sample, view)`, so draws never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derived 64-bit seed for `(seed, counters...)`.
pub fn derive(seed: u64, counters: &[u64]) -> u64 {
    let mut key = splitmix(seed);
    for &c in counters {
        key = splitmix(key ^ splitmix(c.wrapping_add(0x51_7CC1_B727_220A)));
    }
    key
}

/// Independent generator for `(seed, counters...)`.
pub fn stream(seed: u64, counters: &[u64]) -> ChaCha8Rng {
    let key = derive(seed, counters);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(counters.len() as u64);
    rng
}

/// Stable numeric tags for stream domains.
pub mod domain {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const MASK: u64 = 3;
    pub const SYNTH: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const SAMPLER: u64 = 6;
    pub const FINETUNE_MASK: u64 = 7;
    pub const SECOND_VIEW: u64 = 8;
    pub const PROBE: u64 = 9;
}
