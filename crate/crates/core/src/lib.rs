//! Desk-scale study of poisoning attacks on implicit-feedback recommenders
//! driven by counterfactual explanations.
//!
//! The pipeline: load and binarize an interaction dataset, train an NCF-style
//! victim, harvest counterfactual explanations from its ranking API, extract
//! a neural-logic surrogate from observations plus explanations, reverse the
//! surrogate's optimization to craft fake user profiles promoting target
//! items, retrain the victim on the poisoned data, and measure the hit-ratio
//! lift.

pub mod error;
pub mod attack;
pub mod config;
pub mod data;
pub mod harness;
pub mod explainer;
pub mod target;
pub mod rng;
pub mod surrogate;
pub mod synth;
pub mod substrate;

pub use error::{Error, Result};
pub use rng::Rng;
