//! Federated optimization simulation core.
//!
//! Implements accelerated global-momentum federated averaging (FedAGM) and the
//! FedAvg, FedProx, FedAvgM, FedAdam, FedDyn and FedCM baselines over small
//! differentiable models. Everything here is pure computation over `alloc`
//! collections; file formats, threading and the CLI live in the `fedsim` crate.
#![no_std]
// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod checks;
pub mod client;
pub mod data;
pub mod engine;
mod error;
pub mod metrics;
pub mod models;
pub mod params;
pub mod rng;
pub mod server;

pub use client::{Algorithm, ClientResult, LocalAux, LocalConfig};
pub use data::{Dataset, Labels, Partition, PartitionSpec};
pub use engine::{Executor, RoundObserver, RoundRecord, RunConfig, RunOutcome, Serial};
pub use error::{Error, Result};
pub use metrics::{EmaSeries, RoundsToTarget};
pub use models::{Batch, ModelKind, ModelSpec, Targets};
pub use params::ParamVector;
pub use server::{Broadcast, ServerHyper, ServerState};

/// Size in bytes of one transmitted parameter.
pub const BYTES_PER_PARAM: u64 = 8;
