//! Core of the fedinfer inference gateway.
//!
//! Everything in this crate is deterministic and free of IO: it needs an
//! allocator but not `std`. The std companion crate (`fedinfer-gateway`)
//! wraps it with HTTP, authentication transport, file formats and a clock.
//!
//! The main pieces are:
//!
//! - [`registry`]: hosted models, compute endpoints and their configured order.
//! - [`select`]: the priority rules that pick an endpoint for a request.
//! - [`placement`]: first-fit GPU packing over a cluster's nodes.
//! - [`instance`]: the lifecycle state machine of one deployed model copy.
//! - [`fabric`]: an event-driven simulator of the HPC side (scheduler queue,
//!   cold starts, hot instances, auto-scaling, idle release, restarts).
//! - [`backend`]: the deterministic mock engine and service-time model.
//! - [`ratelimit`], [`policy`], [`stats`]: small pure helpers used by the gateway.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod backend;
pub mod fabric;
pub mod hash;
pub mod instance;
pub mod placement;
pub mod policy;
pub mod ratelimit;
pub mod registry;
pub mod select;
pub mod stats;
pub mod time;

pub use fabric::{Fabric, FabricConfig, FabricError, Output, Pool, TaskError, TaskId, TaskSpec};
pub use instance::{InstanceId, InstanceState, ModelInstance};
pub use placement::{ClusterSpec, GpuRef};
pub use registry::{BackendKind, BackendProfile, EndpointSpec, ModelKind, ModelSpec, Registry};
pub use select::{select_endpoint, ClusterStatus, InstanceSummary};
pub use time::{SimDuration, SimTime};
