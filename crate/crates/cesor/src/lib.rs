//! Risk-averse policy-gradient training for context-MDPs.
//!
//! The crate combines three ingredients:
//!
//! * CVaR policy gradients over batches of sampled episodes ([`gradients`]),
//!   with the tail-barrier diagnostics that explain when they stall
//!   ([`analysis`]).
//! * A soft risk-level schedule that starts risk-neutral and anneals to the
//!   target tail fraction ([`schedule`]).
//! * A cross-entropy sampler over parametric context distributions that
//!   over-samples hard environment conditions while importance weights keep
//!   the gradient estimate anchored to the original distribution ([`cem`]).
//!
//! Two benchmark environments are included ([`envs`]): a guarded-maze
//! navigation task and a server-allocation queueing simulation. The
//! [`train`] module ties everything into a reproducible training loop with
//! CSV run logs and JSON checkpoints, and [`cli`] exposes it all as the
//! `cesor` binary (`train`, `eval`, `cem-demo`, `verify`, `replay`).
//!
//! Every sampling path is driven by explicitly derived RNG substreams
//! ([`rng`]), so a run is reproducible byte-for-byte given its master seed,
//! independent of rollout parallelism.

pub mod analysis;
pub mod cem;
pub mod cli;
pub mod core;
pub mod envs;
pub mod gradients;
mod logging;
pub mod policy;
pub mod rng;
pub mod schedule;
pub mod train;

mod error;

pub use error::{Error, Result};
