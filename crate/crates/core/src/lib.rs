//! Deep actor-critic scheduler for discrete resource allocation with rare
//! priority events, plus two continual-learning safeguards (elastic weight
//! consolidation and gradient episodic memory) and the experiment harness
//! used to train, evaluate and stress them.
//!
//! Module map:
//!
//! - [`env`]: job/channel simulation and the weighted step reward.
//! - [`nn`]: fixed-topology MLP with exact backprop, Adam and Fisher estimates.
//! - [`agent`]: actor-critic inference, exploration, replay and gradients.
//! - [`continual`]: EWC and GEM as pluggable gradient transforms.
//! - [`harness`]: scheduler variants, training/evaluation/forgetting runs,
//!   baseline-normalized aggregation.
//! - [`config`], [`metrics`], [`checkpoint`], [`summary`]: file formats and
//!   run-directory plumbing used by the CLI.
//!
//! All randomness flows through explicitly seeded [`rand_chacha::ChaCha8Rng`]
//! streams; see [`seeding`].

pub mod agent;
pub mod checkpoint;
pub mod config;
pub mod continual;
pub mod env;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod seeding;
pub mod summary;

pub use error::{Error, Result};
