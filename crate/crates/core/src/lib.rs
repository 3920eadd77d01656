//! Robust reward learning from noisy pairwise preferences.
//!
//! The crate bundles everything needed to train a soft actor-critic agent
//! from scripted or human preference feedback: a small backprop substrate,
//! toy control environments, an ensemble Bradley-Terry reward model, noisy
//! scripted teachers, a KL-threshold denoising discriminator with label
//! flipping, intrinsic-reward pre-training that warm starts the reward
//! model, disagreement-based query selection and the orchestrating trainer.

// `!(x > 0.0)` is how NaN gets rejected along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod buffer;
pub mod denoise;
pub mod envs;
pub mod error;
pub mod nn;
pub mod plot;
pub mod pretrain;
pub mod query;
pub mod reward;
pub mod sac;
pub mod teachers;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
