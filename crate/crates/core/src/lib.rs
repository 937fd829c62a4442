//! Preference-optimized diffusion policies for offline reinforcement learning.
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`]: small feed-forward networks with hand-written backprop, Adam, and a
//!   finite-difference gradient checker.
//! * [`diffusion`]: the conditional noise-prediction policy (schedule, noising,
//!   behavior-cloning loss, ancestral sampling, per-sample likelihood surrogate).
//! * [`critic`]: expectile-regression value network and twin Q networks.
//! * [`prefgen`]: automatic generation of preferred-action pairs.
//! * [`prefopt`]: Bradley-Terry preference losses, the anti-noise mixture, and the
//!   weighted-regression baseline.
//! * [`trainer`] and [`eval`]: the training loop, checkpoints, rollouts and metrics.
//!
//! [`dataset`] and [`envs`] provide the offline data and the two synthetic
//! environments used for testing at desk scale.

pub mod batch;
pub mod checkpoint;
pub mod critic;
pub mod dataset;
pub mod diffusion;
pub mod envs;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod nn;
pub mod prefgen;
pub mod prefopt;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
