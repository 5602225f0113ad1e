//! Communication-efficient distributed optimization with permissionless
//! validation, exercised at desk scale.
//!
//! The crate implements the full training round of a sparse local-update
//! optimizer (inner AdamW steps, chunk-wise Top-k sparsification with 2-bit
//! quantization and error feedback, outer aggregation), a validator that
//! scores and selects contributors each round, a deterministic multi-peer
//! swarm simulator with churn and a blob-store communication pattern, and
//! small analytic-gradient tasks to drive it all.

pub mod chunk;
pub mod codec;
pub mod config;
pub mod error;
pub mod gauntlet;
pub mod optimizer;
pub mod params;
pub mod rng;
pub mod swarm;
pub mod tasks;

pub use error::{Error, Result};
