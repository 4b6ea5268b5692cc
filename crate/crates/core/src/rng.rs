//! Seeded random streams.
//!
//! Every stochastic step draws from a ChaCha stream addressed by
//! `(seed, stream)`. Training loops use the iteration index as the stream so
//! that a run resumed from a checkpoint consumes exactly the same randomness
//! as an uninterrupted one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream identifiers for the different consumers of a single seed.
pub mod purpose {
    pub const GENERATE: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const MIXTURE: u64 = 4;
    pub const PROBE: u64 = 5;
    pub const MISREPORT: u64 = 6;
    pub const BASELINE: u64 = 7;
    /// Training iterations use `ITERATION_BASE + iteration`.
    pub const ITERATION_BASE: u64 = 1 << 32;
}

pub fn iteration(seed: u64, iteration: usize) -> Rng {
    stream(seed, purpose::ITERATION_BASE + iteration as u64)
}
