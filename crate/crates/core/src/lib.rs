//! Agent-based simulation of social-feed interaction microphysics.
//!
//! A population of agents repeatedly views a ranked slate of items, endorses
//! a budgeted subset, and the shared ledger of endorsement counts feeds back
//! into what later agents see. Runs are deterministic given a config and a
//! master seed.

pub mod agents;
pub mod architecture;
pub mod cli;
pub mod config;
pub mod error;
pub mod engine;
pub mod feed;
pub mod interventions;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod validation;

pub use error::{ConfigError, Error, Result};
