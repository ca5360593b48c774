//! Node workers: membership records, fault injection, log records, task
//! execution and the node state machine.
//!
//! The same [`NodeCore`] state machine runs in two harnesses: a real node
//! thread speaking the TCP wire protocol and executing tasks as OS
//! subprocesses ([`start_node`]), and a deterministic in-process actor
//! driven by the simulation driver with a simulated clock and synthetic
//! task execution ([`sim::SimDriver`]).

mod node;
mod runner;
pub mod sim;

pub use node::{start_node, NodeConfig, NodeCore, NodeError, NodeHandle, NodeTick};
pub use runner::{AssignedTask, SimRunner, SubprocessRunner, TaskCompletion, TaskRunner};

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::Millis;
use crate::util::derive_seed;

/// Master-side view of one worker. `Dead` is terminal for a node id; a
/// restarted worker registers under a fresh id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeState {
    Joining,
    Live,
    Dead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node_id: String,
    /// Concurrent task slots.
    pub capacity: u32,
    pub profile: String,
    pub spot: bool,
    pub last_heartbeat_ms: Millis,
    pub last_seq: u64,
    pub state: NodeState,
    /// Tasks currently dispatched to this node.
    pub assigned: BTreeSet<String>,
}

/// When (if ever) a node abruptly halts — the spot-preemption model.
/// Termination is silent: the node stops heartbeating, nothing else.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum FaultMode {
    None,
    KillAt { at_ms: Millis },
    /// Per-heartbeat death probability.
    KillWithProbability { p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub mode: FaultMode,
    pub seed: u64,
}

impl FaultPlan {
    pub fn none() -> Self {
        Self {
            mode: FaultMode::None,
            seed: 0,
        }
    }

    pub fn kill_with_probability(p: f64, seed: u64) -> Self {
        assert!((0.0..=1.0).contains(&p), "probability out of [0, 1]");
        Self {
            mode: FaultMode::KillWithProbability { p },
            seed,
        }
    }

    pub(crate) fn roller(&self, node_id: &str) -> FaultRoller {
        FaultRoller {
            mode: self.mode,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("fault:{node_id}"))),
        }
    }
}

/// Per-node deterministic fault dice.
pub(crate) struct FaultRoller {
    mode: FaultMode,
    rng: ChaCha8Rng,
}

impl FaultRoller {
    /// Consulted once per heartbeat.
    pub fn should_die(&mut self, now: Millis) -> bool {
        match self.mode {
            FaultMode::None => false,
            FaultMode::KillAt { at_ms } => now >= at_ms,
            FaultMode::KillWithProbability { p } => self.rng.random::<f64>() < p,
        }
    }
}

/// The three collected log streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogSource {
    /// Task stdout/stderr.
    Application,
    /// Per-heartbeat load samples.
    Utilization,
    /// Node lifecycle messages.
    System,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub source: LogSource,
    pub node_id: String,
    pub task_id: Option<String>,
    pub at_ms: Millis,
    pub line: String,
}
