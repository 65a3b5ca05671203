//! Counter-based seed derivation.
//!
//! Every random quantity in the crate is a pure function of a master seed
//! and a small tuple of counters (stream id, trial, row, ...). Results are
//! therefore independent of iteration order and thread schedule, and a
//! partial rerun reproduces the matching slice of a full run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers. Distinct streams never share derived seeds.
pub mod stream {
    pub const TIES: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const CALIBRATION_U: u64 = 3;
    pub const EVALUATION_U: u64 = 4;
    pub const TRIAL: u64 = 5;
    pub const TUNING: u64 = 6;
    pub const SYNTH_ROW: u64 = 7;
    pub const SYNTH_ORACLE: u64 = 8;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `seed`, one splitmix64 round per part.
pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Uniform variate in `[0, 1)` with 53 random bits.
pub fn uniform(seed: u64, parts: &[u64]) -> f64 {
    (derive(seed, parts) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, parts))
}

/// Per-row uniform variates for one split of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UStream {
    pub seed: u64,
    pub stream: u64,
}

impl UStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn at(&self, row: usize) -> f64 {
        uniform(self.seed, &[self.stream, row as u64])
    }
}
