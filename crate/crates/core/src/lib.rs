//! Desk-scale distributed deep-learning orchestration.
//!
//! The crate is organized around three layers:
//!
//! - **Workflow definition**: [`recipe`] parses YAML recipes into a DAG of
//!   experiments, [`paramgrid`] expands parameter specs into concrete
//!   per-task assignments.
//! - **Data plane**: [`objectstore`] is an S3-like put/get/list store with
//!   injectable latency/bandwidth modeling, [`chunkfs`] packs file trees
//!   into content-addressed chunks on top of it and serves reads through a
//!   per-node cache with prefetch.
//! - **Control plane**: [`scheduler`] is the event-sourced task scheduling
//!   state machine, [`cluster`] runs node workers (real subprocesses or
//!   deterministic simulated actors), [`master`] ties them together behind
//!   a length-prefixed JSON wire protocol ([`wire`]) with snapshot/replay
//!   crash recovery.
//!
//! [`bench`] reproduces the throughput and streaming-equivalence behaviors
//! of the data plane against the modeled store.

pub mod bench;
pub mod chunkfs;
pub mod clock;
pub mod cluster;
pub mod master;
pub mod objectstore;
pub mod paramgrid;
pub mod recipe;
pub mod scheduler;
pub mod util;
pub mod wire;
