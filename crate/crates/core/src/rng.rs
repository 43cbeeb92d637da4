//! Deterministic seeding. Every component draws from its own ChaCha stream
//! derived from one root seed, so adding draws in one place never shifts
//! another component's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream ids for the components that consume randomness.
pub mod stream {
    pub const ROLLOUT: u64 = 1;
    pub const CRITIC: u64 = 2;
    pub const METRICS: u64 = 3;
    pub const PERTURBATION: u64 = 4;
    pub const CALIBRATION: u64 = 5;
    pub const CONTINUOUS: u64 = 6;
    pub const SCENARIO: u64 = 7;
    pub const DATA: u64 = 8;
}

pub fn rng_for(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
