//! Seed derivation.
//!
//! Every stochastic component owns a [`ChaCha8Rng`] (the `rand_chacha` crate's
//! 8-round ChaCha stream cipher generator, seeded with `seed_from_u64`). Child
//! seeds are derived from a run seed with SplitMix64 so that independent
//! streams (environment episodes, exploration, replay sampling, init) never
//! share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep derived seeds for different purposes apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    ActorInit = 1,
    CriticInit = 2,
    Exploration = 3,
    Replay = 4,
    TrainEnv = 5,
    EvalEnv = 6,
    Memory = 7,
    Fisher = 8,
    /// Per-stage agent seeds for runs that resume from a checkpoint.
    Phase = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic child seed for `(seed, stream, index)`.
pub fn derive(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream as u64) ^ index)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    rng(derive(seed, stream, index))
}
