//! Variational flow maps on CPU.
//!
//! A mean-flow generator `u(x, r, t)` and a Gaussian noise adapter
//! `q(z | y, c)` are trained jointly so that one (or a few) evaluations of
//! the flow map turn adapter noise into posterior samples of a linear
//! inverse problem. The crate also carries the closed-form linear-Gaussian
//! theory of the method as a test oracle, a 2D checkerboard benchmark and
//! its metric suite.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod lingauss;
pub mod metrics;
pub mod nets;
pub mod par;
pub mod pipeline;
pub mod plot;
pub mod problems;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};

/// Deterministic generator used throughout the crate.
pub type SimRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SimRng {
    use rand::SeedableRng;
    SimRng::seed_from_u64(seed)
}
