//! Seeded random streams.
//!
//! Every random draw in training and sampling comes from a [`ChaCha8Rng`]
//! keyed by `(seed, step)` and split into independent streams per purpose, so
//! changing how one consumer uses randomness never shifts another's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as Rng;

/// Independent purposes that draw randomness during a training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Noise = 1,
    Time = 2,
    Split = 3,
    Dropout = 4,
    Reparam = 5,
    Prior = 6,
    Shuffle = 7,
    Init = 8,
    Sample = 9,
    Data = 10,
}

/// A generator for `stream` at `step` of a run seeded with `seed`.
pub fn stream(seed: u64, step: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((step << 8) | which as u64);
    rng
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
