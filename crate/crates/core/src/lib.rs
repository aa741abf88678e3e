//! Desk-scale inverse-RL training of token-level process reward models.
//!
//! The crate is organized around a deterministic token-level MDP with
//! synthetic verifiable tasks (`mdp`), tabular/linear policy and reward
//! models (`models`), exact enumeration oracles for every otherwise
//! intractable quantity (`oracle`), the dual reward/policy training loop
//! (`trainer`), the baseline methods it unifies (`baselines`), evaluation
//! and test-time scaling (`eval`), and a plain-text experiment config
//! (`config`).
//!
//! Parallelism is data-parallel over independent seeded work items (see
//! `par`); every reduction is ordered, so results are bitwise identical
//! for any worker count and with the `parallel` feature disabled.

pub mod baselines;
pub mod config;
pub mod error;
pub mod eval;
pub mod mdp;
pub mod models;
pub mod oracle;
pub mod par;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
