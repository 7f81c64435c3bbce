//! Node-level differentially private training of graph neural networks.
//!
//! Training subgraphs are sampled with every in-degree capped at `K`, so any
//! node appears in at most `N(K, r) = 1 + K + ... + K^r` of them. Per-example
//! gradients are clipped block by block and noised in proportion to that
//! bound, and the [`accountant`] turns the noise multiplier, batch size and
//! step count into an `(epsilon, delta)` guarantee.

pub mod accountant;
pub mod cli;
pub mod drop;
pub mod error;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod sampler;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
