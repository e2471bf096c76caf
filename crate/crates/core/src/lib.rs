//! Sparse indirect adversarial attacks and defenses for multivariate
//! probabilistic time-series forecasters.
//!
//! The crate is organized around the attack/defense pipeline:
//!
//! - [`diff`]: a small reverse-mode autodiff engine (f64, dense tensors)
//!   that gradients of attack objectives and model likelihoods run through.
//! - [`data`]: dataset ingestion, synthetic generators with known dynamics,
//!   and windowing.
//! - [`models`]: probabilistic forecasters with reparameterizable sampling:
//!   a closed-form linear VAR and a recurrent low-rank Gaussian model.
//! - [`attacks`]: the deterministic projected-gradient sparse attack and the
//!   trainable probabilistic sparse-layer attack.
//! - [`defenses`]: Gaussian data augmentation, randomized smoothing, and
//!   mini-max adversarial training.
//! - [`metrics`]: weighted quantile loss and relative-error metrics for
//!   probabilistic forecasts.
//! - [`harness`]: experiment runner producing attack-sweep result tables.

pub mod attacks;
pub mod data;
pub mod defenses;
pub mod diff;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod optim;

pub use diff::{DiffError, Graph, NodeId, Tensor};

/// The crate-wide seeded RNG: portable and stable across platforms.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

/// Derive a child RNG seed from a base seed and a stream path, so that
/// per-window / per-cell streams are independent and reproducible.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut state = base ^ 0x9e37_79b9_7f4a_7c15;
    for &part in path {
        state = splitmix64(state ^ part);
    }
    splitmix64(state)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
