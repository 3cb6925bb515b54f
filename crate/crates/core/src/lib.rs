//! Channel-level sparse training where both the forward and backward passes
//! touch only the sampled channels.
//!
//! Each prunable channel `j` carries a keep probability `s_j`. A training
//! step draws two Bernoulli masks from `s`, runs two sparse forward passes,
//! updates the weights by backpropagation through the first mask only, and
//! moves `s` along a variance-reduced policy-gradient estimate followed by a
//! projection onto `{s ∈ [0,1]^n : Σ s ≤ K}`.

pub mod cost;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod meter;
pub mod network;
pub mod structure;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use network::{Batch, Mask, NetworkParams, NetworkSpec};
pub use structure::{SeededSampler, StructureVector};
