//! Simulator for federated edge learning on streaming, class-incremental
//! non-i.i.d. data, with temporal-drift- and divergence-aware client
//! scheduling under wireless bandwidth and deadline constraints.

pub mod config;
pub mod datastream;
pub mod distributions;
pub mod error;
pub mod learning;
pub mod metrics;
pub mod orchestrator;
pub mod scheduler;
pub mod seed;
pub mod wireless;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};

/// Index of a client in `0..N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub u32);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}
