//! OpenAI-compatible inference gateway over a federation of simulated HPC
//! clusters: token auth, endpoint selection, on-demand model instances,
//! batch jobs, usage telemetry and a load generator.

pub mod app;
pub mod auth;
pub mod batch;
pub mod bench;
pub mod clock;
pub mod config;
pub mod driver;
pub mod ids;
pub mod openai;
pub mod router;
pub mod serving;
pub mod telemetry;
