//! Continual meta-policy search.
//!
//! An agent solves a sequence of reinforcement-learning tasks one at a time
//! and never returns to a finished task. Between tasks it meta-trains the
//! initialization of its policy from stored experience: an importance-sampled
//! policy-gradient step (with a V-trace baseline) adapts the policy to each
//! past task, and a behavioral-cloning loss on that task's best trajectories
//! scores the adapted policy.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, configuration
//! parsing and the command line live in the `comps` crate.
//!
//! Module map:
//! - [`nn`]: dense networks with exact reverse-mode gradients, the Gaussian
//!   policy head and Adam.
//! - [`env`]: the three toy task families and their task sequences.
//! - [`buffer`]: skilled and off-policy experience per task.
//! - [`ppo`]: on-policy adaptation to the current task.
//! - [`vtrace`]: V-trace targets and the off-policy inner gradient.
//! - [`meta`]: the meta-training loop.
//! - [`driver`]: the continual protocol and its metrics.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod buffer;
pub mod driver;
pub mod env;
mod error;
pub mod math;
pub mod meta;
pub mod nn;
pub mod ppo;
pub mod rng;
pub mod vtrace;

pub use error::{Error, Result};
