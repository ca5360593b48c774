//! Deterministic cluster simulation.
//!
//! Master and nodes run in one thread on a simulated clock, exchanging the
//! same message values as the TCP transport. Each [`SimDriver::step`] is one
//! heartbeat interval: respawn due replacement workers, tick every node
//! (fault roll, completions, heartbeat), feed their messages to the master
//! in order, tick the master, deliver assignments. Given the same seed and
//! inputs, two runs produce byte-identical event logs — the basis of the
//! soak, safety and crash-recovery suites.
//!
//! Spot preemption kills a worker silently; the driver provisions a
//! replacement (fresh node id) after `respawn_delay_ms`, mirroring how a
//! spot fleet keeps its target size.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use crate::clock::SimClock;
use crate::cluster::{FaultPlan, NodeConfig, NodeCore, NodeTick, SimRunner};
use crate::master::{LogStore, Master, MasterConfig, MasterError, MemEventLog, SharedEventLog};
use crate::objectstore::{MemStore, SharedStore};
use crate::recipe::Phase;
use crate::scheduler::{SchedulerConfig, SchedulerEvent, WorkflowStatus};
use crate::wire::MasterMessage;

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub nodes: u32,
    pub capacity: u32,
    /// Per-heartbeat kill probability for every worker.
    pub spot_kill_prob: f64,
    pub seed: u64,
    pub heartbeat_interval_ms: u64,
    pub liveness_timeout_ms: u64,
    pub max_attempts_per_task: u32,
    /// Simulated task duration.
    pub exec_ms: u64,
    pub respawn_delay_ms: u64,
    /// 0 disables periodic snapshots.
    pub snapshot_interval_ms: u64,
    /// Step budget for `run_to_terminal`.
    pub max_ticks: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            nodes: 4,
            capacity: 1,
            spot_kill_prob: 0.0,
            seed: 0,
            heartbeat_interval_ms: 100,
            liveness_timeout_ms: 350,
            max_attempts_per_task: 3,
            exec_ms: 50,
            respawn_delay_ms: 300,
            snapshot_interval_ms: 0,
            max_ticks: 100_000,
        }
    }
}

struct SimNode {
    core: NodeCore,
}

pub struct SimDriver {
    pub clock: SimClock,
    config: SimConfig,
    master: Master,
    store: SharedStore,
    event_log: SharedEventLog,
    nodes: Vec<SimNode>,
    respawns: Vec<u64>,
    spawned: u64,
    ticks: u64,
}

impl SimDriver {
    pub fn new(config: SimConfig) -> Result<Self, MasterError> {
        let clock = SimClock::new(0);
        let store: SharedStore = Arc::new(MemStore::new());
        let event_log = MemEventLog::shared();
        let master = Master::new(
            MasterConfig {
                scheduler: SchedulerConfig {
                    heartbeat_interval_ms: config.heartbeat_interval_ms,
                    liveness_timeout_ms: config.liveness_timeout_ms,
                    max_attempts_per_task: config.max_attempts_per_task,
                    reschedule_same_node: false,
                },
                snapshot_interval_ms: config.snapshot_interval_ms,
                ..Default::default()
            },
            Arc::clone(&store),
            Arc::clone(&event_log),
            LogStore::in_memory(),
            Arc::new(clock.clone()),
        )?;
        let mut driver = Self {
            clock,
            config,
            master,
            store,
            event_log,
            nodes: Vec::new(),
            respawns: Vec::new(),
            spawned: 0,
            ticks: 0,
        };
        for _ in 0..driver.config.nodes {
            driver.spawn_node()?;
        }
        Ok(driver)
    }

    pub fn master(&mut self) -> &mut Master {
        &mut self.master
    }

    pub fn submit(&mut self, yaml: &str, seed: u64) -> Result<String, MasterError> {
        let (id, _) = self.master.submit_recipe(yaml, seed)?;
        Ok(id)
    }

    pub fn status(&self, workflow_id: &str) -> Result<WorkflowStatus, MasterError> {
        self.master.get_status(workflow_id)
    }

    pub fn live_node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn event_lines(&self) -> Vec<String> {
        self.event_log.lock().unwrap().lines().expect("memory log")
    }

    pub fn events(&self) -> Vec<SchedulerEvent> {
        self.event_lines()
            .iter()
            .map(|l| serde_json::from_str(l).expect("log lines are events"))
            .collect()
    }

    fn spawn_node(&mut self) -> Result<(), MasterError> {
        self.spawned += 1;
        let node_id = format!("n{:04}", self.spawned);
        let fault = if self.config.spot_kill_prob > 0.0 {
            FaultPlan::kill_with_probability(self.config.spot_kill_prob, self.config.seed)
        } else {
            FaultPlan::none()
        };
        let mut node_config = NodeConfig::new(node_id, self.config.capacity);
        node_config.spot = self.config.spot_kill_prob > 0.0;
        node_config.heartbeat_interval_ms = self.config.heartbeat_interval_ms;
        node_config.fault_plan = fault;
        let core = NodeCore::new(
            node_config,
            Box::new(SimRunner::new(self.config.exec_ms)),
            PathBuf::from("/sim"),
        );
        self.master.handle_node_message(core.register_message())?;
        self.nodes.push(SimNode { core });
        Ok(())
    }

    /// One heartbeat interval of simulated time.
    pub fn step(&mut self) -> Result<(), MasterError> {
        self.ticks += 1;
        let now = self.clock.advance(self.config.heartbeat_interval_ms);

        // Replacement capacity comes online.
        let due: Vec<u64> = self.respawns.iter().copied().filter(|t| *t <= now).collect();
        self.respawns.retain(|t| *t > now);
        for _ in due {
            self.spawn_node()?;
        }

        // Node phase: fault rolls, completions, heartbeats.
        let mut dead = Vec::new();
        for idx in 0..self.nodes.len() {
            match self.nodes[idx].core.tick(now) {
                NodeTick::Halted => dead.push(idx),
                NodeTick::Messages(msgs) => {
                    for msg in msgs {
                        self.master.handle_node_message(msg)?;
                    }
                }
            }
        }
        for idx in dead.into_iter().rev() {
            self.nodes.remove(idx);
            self.respawns.push(now + self.config.respawn_delay_ms);
        }
        self.respawns.sort_unstable();

        // Master phase: liveness, assignment, snapshots.
        let directives = self.master.tick()?;
        for (node_id, MasterMessage::Assign {
            task_id,
            command,
            env,
        }) in directives
        {
            let attempt = env
                .get("HYPER_ATTEMPT")
                .and_then(|a| a.parse().ok())
                .unwrap_or(1);
            // Assignments to workers that died this tick are lost, exactly
            // like frames onto a dead connection; the liveness timeout
            // recovers the task.
            if let Some(node) = self.nodes.iter_mut().find(|n| n.core.node_id() == node_id) {
                let msgs = node.core.on_assign(
                    crate::cluster::AssignedTask {
                        task_id,
                        attempt,
                        command,
                        env: env.into_iter().collect::<BTreeMap<_, _>>(),
                    },
                    now,
                );
                for msg in msgs {
                    self.master.handle_node_message(msg)?;
                }
            }
        }
        Ok(())
    }

    /// Step until the workflow reaches a terminal phase (or the tick budget
    /// runs out, which returns the current phase).
    pub fn run_to_terminal(&mut self, workflow_id: &str) -> Result<Phase, MasterError> {
        loop {
            let phase = self.status(workflow_id)?.phase;
            if phase.is_terminal() || self.ticks >= self.config.max_ticks {
                return Ok(phase);
            }
            self.step()?;
        }
    }

    /// Simulate a master crash: throw the in-memory master away and rebuild
    /// it from the store snapshot plus the surviving event log. Workers are
    /// untouched (they are separate machines).
    pub fn crash_and_restore_master(&mut self) -> Result<(), MasterError> {
        let config = MasterConfig {
            scheduler: SchedulerConfig {
                heartbeat_interval_ms: self.config.heartbeat_interval_ms,
                liveness_timeout_ms: self.config.liveness_timeout_ms,
                max_attempts_per_task: self.config.max_attempts_per_task,
                reschedule_same_node: false,
            },
            snapshot_interval_ms: self.config.snapshot_interval_ms,
            ..Default::default()
        };
        self.master = Master::restore(
            config,
            Arc::clone(&self.store),
            Arc::clone(&self.event_log),
            LogStore::in_memory(),
            Arc::new(self.clock.clone()),
        )?;
        Ok(())
    }

    /// Final per-task ledger: (task id -> (state, attempt count, distinct
    /// succeeded transitions in the event log)).
    pub fn task_ledger(&self, workflow_id: &str) -> BTreeMap<String, LedgerEntry> {
        let mut ledger = BTreeMap::new();
        if let Some(wf) = self.master.scheduler().workflow(workflow_id) {
            for exp in &wf.experiments {
                for task in &exp.tasks {
                    ledger.insert(
                        task.id.clone(),
                        LedgerEntry {
                            state: format!("{:?}", task.state),
                            attempts: task.attempts.len(),
                            succeeded_transitions: 0,
                            commands: Vec::new(),
                        },
                    );
                }
            }
        }
        for event in self.events() {
            match event {
                SchedulerEvent::TaskFinished {
                    task_id,
                    outcome: crate::scheduler::AttemptOutcome::Success,
                    ..
                } => {
                    if let Some(entry) = ledger.get_mut(&task_id) {
                        entry.succeeded_transitions += 1;
                    }
                }
                SchedulerEvent::TaskAssigned {
                    task_id, command, ..
                } => {
                    if let Some(entry) = ledger.get_mut(&task_id) {
                        entry.commands.push(command);
                    }
                }
                _ => {}
            }
        }
        ledger
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerEntry {
    pub state: String,
    pub attempts: usize,
    /// Successful TaskFinished events in the log; exactly-once on healthy
    /// runs.
    pub succeeded_transitions: usize,
    /// The command of every dispatched attempt, byte-for-byte.
    pub commands: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::Clock;

    fn echo_recipe(samples: u32, workers: u32) -> String {
        format!(
            "version: 1\nexperiments:\n  t:\n    command: echo hi\n    workers: {workers}\n    samples: {samples}\n"
        )
    }

    #[test]
    fn healthy_sim_completes_workflow() {
        let mut sim = SimDriver::new(SimConfig {
            nodes: 3,
            capacity: 2,
            ..Default::default()
        })
        .unwrap();
        let id = sim.submit(&echo_recipe(10, 3), 0).unwrap();
        let phase = sim.run_to_terminal(&id).unwrap();
        assert_eq!(phase, Phase::MonitoringComplete);
        let ledger = sim.task_ledger(&id);
        assert_eq!(ledger.len(), 10);
        assert!(ledger.values().all(|e| e.succeeded_transitions == 1));
        assert!(ledger.values().all(|e| e.attempts == 1));
    }

    #[test]
    fn sim_is_deterministic_per_seed() {
        let run = |seed: u64| -> Vec<String> {
            let mut sim = SimDriver::new(SimConfig {
                nodes: 4,
                capacity: 1,
                spot_kill_prob: 0.15,
                seed,
                ..Default::default()
            })
            .unwrap();
            let id = sim.submit(&echo_recipe(20, 4), seed).unwrap();
            sim.run_to_terminal(&id).unwrap();
            sim.event_lines()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn spot_kills_are_survived() {
        let mut sim = SimDriver::new(SimConfig {
            nodes: 4,
            capacity: 2,
            spot_kill_prob: 0.2,
            seed: 13,
            ..Default::default()
        })
        .unwrap();
        let id = sim.submit(&echo_recipe(30, 4), 1).unwrap();
        let phase = sim.run_to_terminal(&id).unwrap();
        assert_eq!(phase, Phase::MonitoringComplete);
        let ledger = sim.task_ledger(&id);
        assert!(ledger.values().all(|e| e.succeeded_transitions == 1));
        // Rescheduled attempts reuse the exact command bytes.
        for entry in ledger.values() {
            assert!(entry
                .commands
                .windows(2)
                .all(|pair| pair[0] == pair[1]));
        }
    }

    #[test]
    fn kill_at_is_detected_within_liveness_timeout() {
        let mut sim = SimDriver::new(SimConfig {
            nodes: 1,
            ..Default::default()
        })
        .unwrap();
        // Make the only node die at t=400ms by injecting a KillAt plan.
        let mut config = NodeConfig::new("doomed", 1);
        config.heartbeat_interval_ms = 100;
        config.fault_plan = FaultPlan {
            mode: crate::cluster::FaultMode::KillAt { at_ms: 400 },
            seed: 0,
        };
        let core = NodeCore::new(config, Box::new(SimRunner::new(50)), PathBuf::from("/sim"));
        sim.master.handle_node_message(core.register_message()).unwrap();
        sim.nodes.push(SimNode { core });

        for _ in 0..10 {
            sim.step().unwrap();
        }
        let node = sim.master.scheduler().node("doomed").unwrap();
        assert_eq!(node.state, crate::cluster::NodeState::Dead);
        // Death declared within liveness_timeout of the last heartbeat (300ms
        // at t=300, timeout 350ms -> dead by t=700).
        assert!(sim.clock.now_ms() >= 700);
    }
}
