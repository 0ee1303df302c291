//! Context-bootstrapped reinforcement learning at desk scale.
//!
//! Verifiable reasoning tasks, a bank of solved exemplars injected into
//! training prompts with a linearly annealed probability, and GRPO / RLOO
//! training of a small character-level transformer policy.

pub mod bank;
pub mod config;
pub mod error;
pub mod experiments;
pub mod instrument;
pub mod policy;
pub mod prompting;
pub mod rl;
pub mod rng;
pub mod schedule;
pub mod tasks;
pub mod trainer;
pub mod warmstart;

pub use error::{CbrlError, Result};
