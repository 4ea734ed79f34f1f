//! Seeded random streams.
//!
//! Every consumer of randomness takes an explicit generator. Runs derive one
//! independent ChaCha stream per (seed, purpose, index) so that, for example,
//! the rollouts of task 0 are identical for every learner given the same seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Sequence = 1,
    Init = 2,
    Rollout = 3,
    Finalize = 4,
    Meta = 5,
    Evaluation = 6,
}

pub fn seeded(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

pub fn derive(seed: u64, purpose: Purpose, index: u64) -> SimRng {
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) ^ index);
    rng
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
