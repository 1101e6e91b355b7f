//! Run-level seed splitting.
//!
//! Every consumer of randomness draws from its own ChaCha8 stream derived
//! from the single run seed, so adding draws in one place never shifts
//! another consumer's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    /// Weight initialization of a fresh network.
    Init = 1,
    /// Minibatch shuffling during SGD.
    Train = 2,
    /// Calibration batch used for initial scores.
    Calibration = 3,
    /// Scores of the `random` method.
    RandomScores = 4,
    /// Per-step pruning batches.
    PruningBatch = 5,
    /// Per-step layer choice.
    Layer = 6,
    /// Base seeds handed to the block solver.
    Solver = 7,
    /// Synthetic dataset generation.
    Synthetic = 8,
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
