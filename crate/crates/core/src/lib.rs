//! Knowledge-graph embedding losses as expected Bregman divergences.
//!
//! The crate covers data loading, Bregman generators, closed-form objective
//! distributions with a brute-force certification oracle, score models, losses,
//! a training loop and filtered ranking evaluation.

pub mod bregman;
pub mod data;
pub mod error;
pub mod losses;
pub mod rng;
pub mod oracle;
pub mod models;
pub mod eval;
pub mod trainer;
pub mod synthetic;
