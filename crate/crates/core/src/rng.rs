//! Seeded random streams.
//!
//! Every stochastic step draws from a ChaCha8 stream keyed by `(seed, stream)`,
//! so independent consumers never share state and results do not depend on
//! call order across components.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Well-known stream identifiers.
pub mod streams {
    pub const SOURCE_POOL: u64 = 1;
    pub const TARGET_POOL: u64 = 2;
    pub const SOURCE_BAGS: u64 = 3;
    pub const TARGET_BAGS: u64 = 4;
    pub const KMEANS: u64 = 5;
    pub const INIT_STEP1: u64 = 10;
    pub const INIT_TWIN_A: u64 = 11;
    pub const INIT_TWIN_B: u64 = 12;
    pub const SHUFFLE: u64 = 20;
    pub const NEGATIVE_SAMPLE: u64 = 21;
}

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Round half away from zero.
pub fn round_half_away(x: f64) -> i64 {
    // f64::round already rounds half away from zero.
    x.round() as i64
}
