//! Deep temporal community modeling for dynamic relational data.
//!
//! This crate implements a multilayer, time-coupled membership model for
//! binary interaction networks observed over discrete time steps. Each node
//! carries a per-layer, per-step membership distribution; memberships are
//! coupled downward through layers and forward through time by non-negative
//! influence coefficients that live only on observed links (plus each node's
//! own history), so both simulation and inference scale with the number of
//! positive links rather than all node pairs. Links are generated from latent
//! interaction counts through a community compatibility matrix, which gives
//! closed-form conditional updates for every variable.
//!
//! Functionality is organized as:
//!
//! - [`dist`]: seeded samplers for the required distribution families;
//! - [`graph`]: dynamic network data, holdout splitting, dataset statistics;
//! - [`model`]: hyperparameters, latent state, forward simulation,
//!   checkpointing;
//! - [`infer`]: the Gibbs sampler (count propagation plus conjugate updates);
//! - [`evaluate`]: held-out link prediction and ranking metrics;
//! - [`diag`]: sampler validation and state summaries;
//! - [`cli`]: the command-line front end used by the `dyncom` binary.

pub mod cli;
pub mod diag;
pub mod dist;
mod error;
pub mod evaluate;
pub mod graph;
pub mod infer;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
