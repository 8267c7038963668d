//! Desk-scale laboratory for reinforcement learning from augmented generation.
//!
//! The crate wires a from-scratch autodiff engine and tiny causal transformer
//! into the full training method: BM25 snippet retrieval, paired
//! augmented/naive option sampling, clipped margin rewards with the
//! sampling-driven weight schedule, the iterative sample-then-optimize loop,
//! and the SFT / CPT baselines — plus a deterministic synthetic fact world
//! and the numerical checks that keep all of it honest.

pub mod error;
pub mod eval;
pub mod kb;
pub mod lm;
pub mod rewards;
pub mod sampler;
pub mod synth;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testkit;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
