//! Deterministic per-trajectory random streams.
//!
//! Trajectory `i` of an ensemble with master seed `s` always draws from
//! ChaCha8 keyed by `s` on stream `i`, so ensembles can be split across
//! threads in any order and still reproduce bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub fn trajectory_stream(master_seed: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}
