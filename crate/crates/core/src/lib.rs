//! Workload pattern mining for database query logs.
//!
//! The pipeline turns a stream of executed queries into per-business workload
//! patterns and parallel execution schedules:
//!
//! 1. [`log_ingest`] parses query-log lines and keeps a retention-bounded store.
//! 2. [`sql_template`] digests SQL into templates with a stable [`SqlId`].
//! 3. [`embedding`] maps SQL text to semantic vectors through a caching store.
//! 4. [`exec_features`] encodes execution statistics into a numeric vector.
//! 5. [`classifier`] assigns queries to business groups.
//! 6. [`pattern_miner`] selects a Markov order by description length and
//!    extracts threshold patterns per group.
//! 7. [`optimizer`] turns a pattern into a dependency DAG and stage schedule.
//! 8. [`service`] wires everything together with persistence and an HTTP-style
//!    request handler.
//!
//! [`synthetic`] generates seeded multi-business workloads with planted
//! patterns for demos and tests.

pub mod classifier;
pub mod embedding;
pub mod error;
pub mod exec_features;
pub mod fnv;
pub mod log_ingest;
pub mod optimizer;
pub mod pattern_miner;
pub mod service;
pub mod sql_template;
pub mod synthetic;

pub use error::{Error, Result};
pub use sql_template::{SqlId, SqlTemplate};
