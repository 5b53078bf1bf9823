//! Seeded, stream-separated random number generation.
//!
//! Every consumer draws from a ChaCha8 generator keyed by the run seed and a
//! fixed stream id, so changing how one subsystem consumes randomness never
//! perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

/// Stream ids. Client SGD streams live above [`streams::CLIENT_SGD_BASE`],
/// Monte Carlo trials above [`streams::MONTE_CARLO_BASE`].
pub mod streams {
    pub const DATASET: u64 = 0;
    pub const THETA_DRAWS: u64 = 1;
    pub const CLIENT_SAMPLING: u64 = 2;
    pub const RANK_PROBE: u64 = 3;
    pub const ASSUMPTION_CHECKS: u64 = 4;
    pub const BOUND_ESTIMATE: u64 = 5;
    pub const SIGMA_ESTIMATE: u64 = 6;
    pub const CLIENT_SGD_BASE: u64 = 1 << 20;
    pub const MONTE_CARLO_BASE: u64 = 1 << 40;
}

/// Generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
