//! Graph-based deep operator network surrogate for time-dependent PDEs.
//!
//! The model follows an encode-process-decode layout on a k-NN sensor graph:
//! a pointwise encoder lifts bundled solution frames into per-node latents,
//! a message-passing processor advances the latents one time block per
//! application, and a soft-attention decoder produces coefficients that pair
//! with a trunk basis to give a field evaluable at arbitrary positions.
//! Alongside the model live the data generators (forced Burgers, analytic
//! advection, shallow-water initial conditions), a training loop, and the
//! evaluation protocols (rollout error, irregular-grid queries, time
//! extrapolation, fixed-grid counterexample).

pub mod container;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
