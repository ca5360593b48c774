//! Event-sourced task scheduling state machine.
//!
//! Every state mutation happens in [`Scheduler::apply`], driven by
//! [`SchedulerEvent`]s. Operations (`submit`, `heartbeat`, `task_finished`,
//! `tick`, ...) decide which events to emit based on current state, apply
//! them immediately, and return them for the caller to persist. Replaying a
//! persisted event log through `apply` therefore reconstructs the exact
//! state, which is what snapshot recovery and the replay-based safety tests
//! build on.
//!
//! Scheduling policy: experiments are released when every task of every
//! dependency experiment has succeeded; assignable tasks are paired with
//! live nodes oldest-released-experiment first, then task index; node choice
//! is least-loaded with lowest node id as the tie break. When a node dies,
//! its in-flight tasks return to the assignable pool with the identical
//! rendered command and are preferentially placed on a different node.
//! Node loss does not consume the per-task retry budget; program failures do.

use std::collections::{BTreeMap, BTreeSet};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Millis;
use crate::cluster::{NodeRecord, NodeState};
use crate::recipe::{Phase, TaskState, Workflow};

pub type NodeId = String;
pub type TaskId = String;
pub type WorkflowId = String;

#[derive(Debug, Error, PartialEq)]
pub enum SchedulerError {
    #[error("workflow {0} already submitted")]
    DuplicateWorkflow(WorkflowId),
    #[error("unknown workflow {0}")]
    UnknownWorkflow(WorkflowId),
    #[error("node {0} already registered")]
    DuplicateNode(NodeId),
    #[error("unknown or dead node {0}")]
    UnknownNode(NodeId),
    #[error("no in-flight attempt {attempt} of task {task_id} on node {node_id}")]
    UnknownAttempt {
        task_id: TaskId,
        node_id: NodeId,
        attempt: u32,
    },
    #[error("invalid scheduler config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub heartbeat_interval_ms: u64,
    /// A node missing heartbeats for this long is declared dead.
    pub liveness_timeout_ms: u64,
    /// Program-failure retry budget per task; node loss is not counted.
    pub max_attempts_per_task: u32,
    pub reschedule_same_node: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            heartbeat_interval_ms: 1_000,
            liveness_timeout_ms: 3_000,
            max_attempts_per_task: 3,
            reschedule_same_node: false,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        if self.liveness_timeout_ms <= self.heartbeat_interval_ms {
            return Err(SchedulerError::InvalidConfig(
                "liveness_timeout must exceed heartbeat_interval".into(),
            ));
        }
        if self.max_attempts_per_task < 1 {
            return Err(SchedulerError::InvalidConfig(
                "max_attempts_per_task must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of one execution attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AttemptOutcome {
    Success,
    Failure { exit_code: i32 },
    /// The node hosting the attempt was declared dead.
    NodeLost,
}

impl AttemptOutcome {
    pub fn is_success(self) -> bool {
        matches!(self, AttemptOutcome::Success)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAttempt {
    /// Consecutive from 1 per task.
    pub number: u32,
    pub node_id: NodeId,
    pub started_at_ms: Millis,
    pub ended_at_ms: Option<Millis>,
    pub outcome: Option<AttemptOutcome>,
}

impl TaskAttempt {
    pub fn in_flight(&self) -> bool {
        self.outcome.is_none()
    }
}

/// Append-only, totally ordered log records. Persisted one JSON object per
/// line; replaying them through [`Scheduler::apply`] rebuilds the state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum SchedulerEvent {
    /// Log bootstrap record so a replay from an empty snapshot rebuilds the
    /// full state.
    WorkflowSubmitted { workflow: Box<Workflow>, at_ms: Millis },
    NodeJoined {
        node_id: NodeId,
        capacity: u32,
        spot: bool,
        profile: String,
        at_ms: Millis,
    },
    NodeHeartbeat {
        node_id: NodeId,
        load: u32,
        seq: u64,
        at_ms: Millis,
    },
    NodeDead { node_id: NodeId, at_ms: Millis },
    TaskAssigned {
        workflow_id: WorkflowId,
        task_id: TaskId,
        node_id: NodeId,
        attempt: u32,
        command: String,
        at_ms: Millis,
    },
    TaskFinished {
        workflow_id: WorkflowId,
        task_id: TaskId,
        node_id: NodeId,
        attempt: u32,
        outcome: AttemptOutcome,
        at_ms: Millis,
    },
    ExperimentReleased {
        workflow_id: WorkflowId,
        experiment: String,
        at_ms: Millis,
    },
    WorkflowPhaseChanged {
        workflow_id: WorkflowId,
        phase: Phase,
        at_ms: Millis,
    },
}

/// Consistent point-in-time view of one workflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowStatus {
    pub workflow_id: WorkflowId,
    pub phase: Phase,
    /// Experiment name -> task-state -> count. Counts partition the tasks.
    pub experiments: IndexMap<String, BTreeMap<String, usize>>,
    pub edges: Vec<(String, String)>,
    pub live_nodes: usize,
    pub node_loads: BTreeMap<NodeId, u32>,
    pub event_log_len: u64,
    pub started_at_ms: Millis,
    pub finished_at_ms: Option<Millis>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WorkflowRun {
    workflow: Workflow,
    /// Experiment name -> release sequence number (global, monotone).
    released: BTreeMap<String, u64>,
    submitted_at_ms: Millis,
    finished_at_ms: Option<Millis>,
}

/// The scheduling state machine. Serializable wholesale for snapshots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scheduler {
    pub config: SchedulerConfig,
    nodes: BTreeMap<NodeId, NodeRecord>,
    workflows: BTreeMap<WorkflowId, WorkflowRun>,
    release_counter: u64,
    events_applied: u64,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig) -> Result<Self, SchedulerError> {
        config.validate()?;
        Ok(Self {
            config,
            nodes: BTreeMap::new(),
            workflows: BTreeMap::new(),
            release_counter: 0,
            events_applied: 0,
        })
    }

    pub fn events_applied(&self) -> u64 {
        self.events_applied
    }

    pub fn live_nodes(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.values().filter(|n| n.state == NodeState::Live)
    }

    pub fn node(&self, node_id: &str) -> Option<&NodeRecord> {
        self.nodes.get(node_id)
    }

    pub fn workflow(&self, workflow_id: &str) -> Option<&Workflow> {
        self.workflows.get(workflow_id).map(|run| &run.workflow)
    }

    pub fn workflow_ids(&self) -> Vec<WorkflowId> {
        self.workflows.keys().cloned().collect()
    }

    pub fn task(&self, task_id: &str) -> Option<&crate::recipe::Task> {
        let (workflow_id, _) = task_id.split_once('/')?;
        let run = self.workflows.get(workflow_id)?;
        run.workflow
            .experiments
            .iter()
            .flat_map(|e| e.tasks.iter())
            .find(|t| t.id == task_id)
    }

    // -- operations ---------------------------------------------------------

    /// Register a workflow: source experiments are released immediately and
    /// the phase advances to Orchestrating once at least one node is known.
    pub fn submit(
        &mut self,
        workflow: Workflow,
        now: Millis,
    ) -> Result<Vec<SchedulerEvent>, SchedulerError> {
        if self.workflows.contains_key(&workflow.id) {
            return Err(SchedulerError::DuplicateWorkflow(workflow.id));
        }
        let workflow_id = workflow.id.clone();
        let mut events = Vec::new();
        self.emit(
            &mut events,
            SchedulerEvent::WorkflowSubmitted {
                workflow: Box::new(workflow),
                at_ms: now,
            },
        );
        self.release_ready_experiments(&workflow_id, now, &mut events);
        if self.nodes.values().any(|n| n.state != NodeState::Dead) {
            self.advance_phase(&workflow_id, Phase::Orchestrating, now, &mut events);
        }
        // A workflow with no experiments is trivially complete.
        self.finish_if_complete(&workflow_id, now, &mut events);
        Ok(events)
    }

    pub fn register_node(
        &mut self,
        node_id: &str,
        capacity: u32,
        spot: bool,
        profile: &str,
        now: Millis,
    ) -> Result<Vec<SchedulerEvent>, SchedulerError> {
        if self.nodes.contains_key(node_id) {
            return Err(SchedulerError::DuplicateNode(node_id.to_string()));
        }
        if capacity < 1 {
            return Err(SchedulerError::InvalidConfig(format!(
                "node {node_id} declared zero capacity"
            )));
        }
        let mut events = Vec::new();
        self.emit(
            &mut events,
            SchedulerEvent::NodeJoined {
                node_id: node_id.to_string(),
                capacity,
                spot,
                profile: profile.to_string(),
                at_ms: now,
            },
        );
        let provisioning: Vec<WorkflowId> = self
            .workflows
            .iter()
            .filter(|(_, run)| run.workflow.phase == Phase::Provisioning)
            .map(|(id, _)| id.clone())
            .collect();
        for workflow_id in provisioning {
            self.advance_phase(&workflow_id, Phase::Orchestrating, now, &mut events);
        }
        Ok(events)
    }

    pub fn heartbeat(
        &mut self,
        node_id: &str,
        load: u32,
        seq: u64,
        now: Millis,
    ) -> Result<Vec<SchedulerEvent>, SchedulerError> {
        match self.nodes.get(node_id) {
            Some(n) if n.state != NodeState::Dead => {}
            _ => return Err(SchedulerError::UnknownNode(node_id.to_string())),
        }
        let mut events = Vec::new();
        self.emit(
            &mut events,
            SchedulerEvent::NodeHeartbeat {
                node_id: node_id.to_string(),
                load,
                seq,
                at_ms: now,
            },
        );
        Ok(events)
    }

    /// Record a result reported by a node. Stale reports (no matching
    /// in-flight attempt, e.g. from a node already declared dead) are
    /// rejected with `UnknownAttempt` so the caller can log and drop them.
    pub fn task_finished(
        &mut self,
        task_id: &str,
        node_id: &str,
        attempt: u32,
        outcome: AttemptOutcome,
        now: Millis,
    ) -> Result<Vec<SchedulerEvent>, SchedulerError> {
        let workflow_id = task_workflow_id(task_id)
            .ok_or_else(|| SchedulerError::UnknownWorkflow(task_id.to_string()))?;
        let run = self
            .workflows
            .get(&workflow_id)
            .ok_or_else(|| SchedulerError::UnknownWorkflow(workflow_id.clone()))?;
        let unknown = || SchedulerError::UnknownAttempt {
            task_id: task_id.to_string(),
            node_id: node_id.to_string(),
            attempt,
        };
        let task = run
            .workflow
            .experiments
            .iter()
            .flat_map(|e| e.tasks.iter())
            .find(|t| t.id == task_id)
            .ok_or_else(unknown)?;
        let matches_in_flight = task.attempts.last().is_some_and(|a| {
            a.in_flight() && a.number == attempt && a.node_id == node_id
        });
        if !matches_in_flight {
            return Err(unknown());
        }

        let experiment = task.experiment.clone();
        let mut events = Vec::new();
        self.emit(
            &mut events,
            SchedulerEvent::TaskFinished {
                workflow_id: workflow_id.clone(),
                task_id: task_id.to_string(),
                node_id: node_id.to_string(),
                attempt,
                outcome,
                at_ms: now,
            },
        );

        match outcome {
            AttemptOutcome::Success => {
                if self.experiment_succeeded(&workflow_id, &experiment) {
                    self.release_ready_experiments(&workflow_id, now, &mut events);
                    self.finish_if_complete(&workflow_id, now, &mut events);
                }
            }
            AttemptOutcome::Failure { .. } => {
                let failed = self
                    .task(task_id)
                    .map(|t| t.state == TaskState::Failed)
                    .unwrap_or(false);
                if failed {
                    self.advance_phase(&workflow_id, Phase::Failed, now, &mut events);
                }
            }
            AttemptOutcome::NodeLost => {}
        }
        Ok(events)
    }

    /// Periodic work: declare nodes dead after missed heartbeats (returning
    /// their in-flight tasks to the assignable pool) and hand out new
    /// assignments.
    pub fn tick(&mut self, now: Millis) -> Vec<SchedulerEvent> {
        let mut events = Vec::new();
        let dead: Vec<NodeId> = self
            .nodes
            .values()
            .filter(|n| {
                n.state != NodeState::Dead
                    && now.saturating_sub(n.last_heartbeat_ms) >= self.config.liveness_timeout_ms
            })
            .map(|n| n.node_id.clone())
            .collect();
        for node_id in dead {
            self.emit(&mut events, SchedulerEvent::NodeDead { node_id, at_ms: now });
        }

        for (task_id, node_id) in self.next_assignments(now) {
            let workflow_id = task_workflow_id(&task_id).expect("task ids carry the workflow id");
            self.advance_phase(&workflow_id, Phase::Executing, now, &mut events);
            let task = self.task(&task_id).expect("assignment refers to a known task");
            let attempt = task.attempts.len() as u32 + 1;
            let command = task.rendered_command.clone();
            self.emit(
                &mut events,
                SchedulerEvent::TaskAssigned {
                    workflow_id,
                    task_id,
                    node_id,
                    attempt,
                    command,
                    at_ms: now,
                },
            );
        }
        events
    }

    /// Pure scheduling query: pair assignable tasks of released experiments
    /// with live nodes that have free slots. Order: oldest released
    /// experiment first, then task index; node choice least-loaded, ties to
    /// the lowest node id. An experiment never spans more distinct nodes
    /// than its `workers` setting, and a rescheduled task avoids its
    /// previous node when an alternative exists.
    pub fn next_assignments(&self, _now: Millis) -> Vec<(TaskId, NodeId)> {
        let mut loads: BTreeMap<&str, u32> = self
            .nodes
            .values()
            .filter(|n| n.state == NodeState::Live)
            .map(|n| (n.node_id.as_str(), n.assigned.len() as u32))
            .collect();

        let mut released: Vec<(u64, &crate::recipe::Experiment)> = Vec::new();
        for run in self.workflows.values() {
            if run.workflow.phase == Phase::Failed {
                continue;
            }
            for experiment in &run.workflow.experiments {
                if let Some(&seq) = run.released.get(&experiment.name) {
                    released.push((seq, experiment));
                }
            }
        }
        released.sort_by_key(|(seq, _)| *seq);

        let mut out = Vec::new();
        for (_, experiment) in released {
            // Nodes currently hosting this experiment, for the workers cap.
            let mut experiment_nodes: BTreeSet<&str> = experiment
                .tasks
                .iter()
                .filter(|t| t.state.is_in_flight())
                .filter_map(|t| t.attempts.last())
                .map(|a| a.node_id.as_str())
                .collect();
            for task in &experiment.tasks {
                if !task.state.is_assignable() {
                    continue;
                }
                let avoid = if self.config.reschedule_same_node {
                    None
                } else {
                    task.attempts.last().map(|a| a.node_id.as_str())
                };
                let at_cap = experiment_nodes.len() >= experiment.spec.workers as usize;
                let candidate = |skip_avoided: bool| {
                    loads
                        .iter()
                        .filter(|(id, load)| {
                            let node = &self.nodes[**id];
                            **load < node.capacity
                                && (!at_cap || experiment_nodes.contains(*id))
                                && (!skip_avoided || avoid != Some(**id))
                        })
                        .min_by_key(|(id, load)| (**load, **id))
                        .map(|(id, _)| *id)
                };
                let Some(node_id) = candidate(true).or_else(|| candidate(false)) else {
                    continue;
                };
                *loads.get_mut(node_id).unwrap() += 1;
                experiment_nodes.insert(node_id);
                out.push((task.id.clone(), node_id.to_string()));
            }
        }
        out
    }

    pub fn status(&self, workflow_id: &str) -> Result<WorkflowStatus, SchedulerError> {
        let run = self
            .workflows
            .get(workflow_id)
            .ok_or_else(|| SchedulerError::UnknownWorkflow(workflow_id.to_string()))?;
        let mut experiments = IndexMap::new();
        for experiment in &run.workflow.experiments {
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for task in &experiment.tasks {
                let key = serde_json::to_value(task.state)
                    .expect("task state serializes")
                    .as_str()
                    .unwrap()
                    .to_string();
                *counts.entry(key).or_insert(0) += 1;
            }
            experiments.insert(experiment.name.clone(), counts);
        }
        Ok(WorkflowStatus {
            workflow_id: workflow_id.to_string(),
            phase: run.workflow.phase,
            experiments,
            edges: run.workflow.edges.clone(),
            live_nodes: self.live_nodes().count(),
            node_loads: self
                .nodes
                .values()
                .filter(|n| n.state == NodeState::Live)
                .map(|n| (n.node_id.clone(), n.assigned.len() as u32))
                .collect(),
            event_log_len: self.events_applied,
            started_at_ms: run.submitted_at_ms,
            finished_at_ms: run.finished_at_ms,
        })
    }

    // -- decision helpers ----------------------------------------------------

    fn emit(&mut self, out: &mut Vec<SchedulerEvent>, event: SchedulerEvent) {
        self.apply(&event);
        out.push(event);
    }

    fn experiment_succeeded(&self, workflow_id: &str, experiment: &str) -> bool {
        self.workflows
            .get(workflow_id)
            .and_then(|run| run.workflow.experiment(experiment))
            .map(|e| e.tasks.iter().all(|t| t.state == TaskState::Succeeded))
            .unwrap_or(false)
    }

    /// Release every not-yet-released experiment whose dependencies have all
    /// fully succeeded. No releases happen on failed workflows.
    fn release_ready_experiments(
        &mut self,
        workflow_id: &str,
        now: Millis,
        out: &mut Vec<SchedulerEvent>,
    ) {
        let Some(run) = self.workflows.get(workflow_id) else {
            return;
        };
        if run.workflow.phase == Phase::Failed {
            return;
        }
        let ready: Vec<String> = run
            .workflow
            .experiments
            .iter()
            .filter(|e| !run.released.contains_key(&e.name))
            .filter(|e| {
                e.spec
                    .depends_on
                    .iter()
                    .all(|dep| self.experiment_succeeded(workflow_id, dep))
            })
            .map(|e| e.name.clone())
            .collect();
        for experiment in ready {
            self.emit(
                out,
                SchedulerEvent::ExperimentReleased {
                    workflow_id: workflow_id.to_string(),
                    experiment,
                    at_ms: now,
                },
            );
        }
    }

    fn finish_if_complete(&mut self, workflow_id: &str, now: Millis, out: &mut Vec<SchedulerEvent>) {
        let Some(run) = self.workflows.get(workflow_id) else {
            return;
        };
        let complete = run
            .workflow
            .experiments
            .iter()
            .all(|e| e.tasks.iter().all(|t| t.state == TaskState::Succeeded));
        if complete {
            self.advance_phase(workflow_id, Phase::MonitoringComplete, now, out);
        }
    }

    fn advance_phase(
        &mut self,
        workflow_id: &str,
        phase: Phase,
        now: Millis,
        out: &mut Vec<SchedulerEvent>,
    ) {
        let Some(run) = self.workflows.get(workflow_id) else {
            return;
        };
        if run.workflow.phase == phase || !run.workflow.phase.can_advance_to(phase) {
            return;
        }
        // Intermediate phases are never skipped in the record: a workflow
        // that jumps from Provisioning to Executing logs Orchestrating too.
        if phase == Phase::Executing && run.workflow.phase == Phase::Provisioning {
            self.advance_phase(workflow_id, Phase::Orchestrating, now, out);
        }
        self.emit(
            out,
            SchedulerEvent::WorkflowPhaseChanged {
                workflow_id: workflow_id.to_string(),
                phase,
                at_ms: now,
            },
        );
    }

    // -- state transitions ---------------------------------------------------

    /// Apply one event to the state. Total and deterministic: replaying a
    /// log through `apply` reconstructs the state exactly.
    pub fn apply(&mut self, event: &SchedulerEvent) {
        self.events_applied += 1;
        match event {
            SchedulerEvent::WorkflowSubmitted { workflow, at_ms } => {
                self.workflows.insert(
                    workflow.id.clone(),
                    WorkflowRun {
                        workflow: (**workflow).clone(),
                        released: BTreeMap::new(),
                        submitted_at_ms: *at_ms,
                        finished_at_ms: None,
                    },
                );
            }
            SchedulerEvent::NodeJoined {
                node_id,
                capacity,
                spot,
                profile,
                at_ms,
            } => {
                self.nodes.insert(
                    node_id.clone(),
                    NodeRecord {
                        node_id: node_id.clone(),
                        capacity: *capacity,
                        profile: profile.clone(),
                        spot: *spot,
                        last_heartbeat_ms: *at_ms,
                        last_seq: 0,
                        state: NodeState::Joining,
                        assigned: BTreeSet::new(),
                    },
                );
            }
            SchedulerEvent::NodeHeartbeat {
                node_id,
                seq,
                at_ms,
                ..
            } => {
                let Some(node) = self.nodes.get_mut(node_id) else {
                    return;
                };
                node.last_heartbeat_ms = *at_ms;
                node.last_seq = *seq;
                if node.state == NodeState::Joining {
                    node.state = NodeState::Live;
                }
                // A heartbeat from the hosting node means previously
                // dispatched tasks are running there.
                let hosted = node.assigned.clone();
                for task_id in hosted {
                    if let Some(task) = self.task_mut(&task_id) {
                        if task.state == TaskState::Assigned {
                            task.state = TaskState::Running;
                        }
                    }
                }
            }
            SchedulerEvent::NodeDead { node_id, at_ms } => {
                let Some(node) = self.nodes.get_mut(node_id) else {
                    return;
                };
                node.state = NodeState::Dead;
                let orphaned: Vec<TaskId> = node.assigned.iter().cloned().collect();
                node.assigned.clear();
                for task_id in orphaned {
                    if let Some(task) = self.task_mut(&task_id) {
                        if let Some(attempt) = task.attempts.last_mut() {
                            if attempt.in_flight() {
                                attempt.ended_at_ms = Some(*at_ms);
                                attempt.outcome = Some(AttemptOutcome::NodeLost);
                            }
                        }
                        // Back to the assignable pool with the identical
                        // rendered command; the retry budget is untouched.
                        task.state = TaskState::Rescheduled;
                    }
                }
            }
            SchedulerEvent::TaskAssigned {
                task_id,
                node_id,
                attempt,
                at_ms,
                ..
            } => {
                if let Some(node) = self.nodes.get_mut(node_id) {
                    node.assigned.insert(task_id.clone());
                }
                if let Some(task) = self.task_mut(task_id) {
                    task.state = TaskState::Assigned;
                    task.attempts.push(TaskAttempt {
                        number: *attempt,
                        node_id: node_id.clone(),
                        started_at_ms: *at_ms,
                        ended_at_ms: None,
                        outcome: None,
                    });
                }
            }
            SchedulerEvent::TaskFinished {
                task_id,
                node_id,
                outcome,
                at_ms,
                ..
            } => {
                if let Some(node) = self.nodes.get_mut(node_id) {
                    node.assigned.remove(task_id);
                }
                let max_attempts = self.config.max_attempts_per_task;
                if let Some(task) = self.task_mut(task_id) {
                    if let Some(attempt) = task.attempts.last_mut() {
                        attempt.ended_at_ms = Some(*at_ms);
                        attempt.outcome = Some(*outcome);
                    }
                    task.state = match outcome {
                        AttemptOutcome::Success => TaskState::Succeeded,
                        AttemptOutcome::NodeLost => TaskState::Rescheduled,
                        AttemptOutcome::Failure { .. } => {
                            let failures = task
                                .attempts
                                .iter()
                                .filter(|a| {
                                    matches!(a.outcome, Some(AttemptOutcome::Failure { .. }))
                                })
                                .count() as u32;
                            if failures >= max_attempts {
                                TaskState::Failed
                            } else {
                                TaskState::Rescheduled
                            }
                        }
                    };
                }
            }
            SchedulerEvent::ExperimentReleased {
                workflow_id,
                experiment,
                ..
            } => {
                self.release_counter += 1;
                let seq = self.release_counter;
                if let Some(run) = self.workflows.get_mut(workflow_id) {
                    run.released.insert(experiment.clone(), seq);
                }
            }
            SchedulerEvent::WorkflowPhaseChanged {
                workflow_id,
                phase,
                at_ms,
            } => {
                if let Some(run) = self.workflows.get_mut(workflow_id) {
                    run.workflow.phase = *phase;
                    if phase.is_terminal() {
                        run.finished_at_ms = Some(*at_ms);
                    }
                }
            }
        }
    }

    fn task_mut(&mut self, task_id: &str) -> Option<&mut crate::recipe::Task> {
        let (workflow_id, _) = task_id.split_once('/')?;
        let run = self.workflows.get_mut(workflow_id)?;
        run.workflow
            .experiments
            .iter_mut()
            .flat_map(|e| e.tasks.iter_mut())
            .find(|t| t.id == task_id)
    }
}

fn task_workflow_id(task_id: &str) -> Option<WorkflowId> {
    task_id.split_once('/').map(|(wf, _)| wf.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recipe::{build_workflow, parse_recipe};

    fn workflow(yaml: &str, id: &str) -> Workflow {
        build_workflow(&parse_recipe(yaml).unwrap(), 0)
            .unwrap()
            .with_id(id)
    }

    fn two_node_scheduler() -> Scheduler {
        let mut s = Scheduler::new(SchedulerConfig::default()).unwrap();
        s.register_node("n1", 1, false, "cpu-small", 0).unwrap();
        s.register_node("n2", 1, false, "cpu-small", 0).unwrap();
        s.heartbeat("n1", 0, 1, 10).unwrap();
        s.heartbeat("n2", 0, 1, 10).unwrap();
        s
    }

    fn released(events: &[SchedulerEvent]) -> Vec<&str> {
        events
            .iter()
            .filter_map(|e| match e {
                SchedulerEvent::ExperimentReleased { experiment, .. } => Some(experiment.as_str()),
                _ => None,
            })
            .collect()
    }

    const CHAIN: &str =
        "version: 1\nexperiments:\n  a:\n    command: echo a\n    workers: 2\n  b:\n    command: echo b\n    workers: 2\n    depends_on: [a]\n";

    #[test]
    fn submit_releases_sources_only() {
        let mut s = two_node_scheduler();
        let events = s.submit(workflow(CHAIN, "wf-1"), 20).unwrap();
        assert_eq!(released(&events), vec!["a"]);
        assert_eq!(s.workflow("wf-1").unwrap().phase, Phase::Orchestrating);
    }

    #[test]
    fn duplicate_submit_is_rejected() {
        let mut s = two_node_scheduler();
        s.submit(workflow(CHAIN, "wf-1"), 20).unwrap();
        let err = s.submit(workflow(CHAIN, "wf-1"), 21).unwrap_err();
        assert_eq!(err, SchedulerError::DuplicateWorkflow("wf-1".into()));
    }

    #[test]
    fn capacity_bounds_assignments() {
        let mut s = two_node_scheduler();
        let wf = workflow(
            "version: 1\nexperiments:\n  t:\n    command: echo\n    workers: 2\n    samples: 4\n",
            "wf-1",
        );
        s.submit(wf, 20).unwrap();
        let assignments: Vec<_> = s
            .tick(30)
            .into_iter()
            .filter(|e| matches!(e, SchedulerEvent::TaskAssigned { .. }))
            .collect();
        assert_eq!(assignments.len(), 2);
        // Nothing else fits until slots free up.
        assert!(s.next_assignments(31).is_empty());
        // Finish one; the next tick hands out exactly one more.
        s.task_finished("wf-1/t.0", "n1", 1, AttemptOutcome::Success, 40)
            .unwrap();
        assert_eq!(s.next_assignments(41).len(), 1);
    }

    #[test]
    fn tie_break_prefers_lowest_node_id() {
        let mut s = two_node_scheduler();
        let wf = workflow(
            "version: 1\nexperiments:\n  t:\n    command: echo\n    workers: 2\n    samples: 1\n",
            "wf-1",
        );
        s.submit(wf, 20).unwrap();
        let pairs = s.next_assignments(30);
        assert_eq!(pairs, vec![("wf-1/t.0".to_string(), "n1".to_string())]);
    }

    #[test]
    fn unreleased_experiments_are_never_assigned() {
        let mut s = two_node_scheduler();
        s.submit(workflow(CHAIN, "wf-1"), 20).unwrap();
        let pairs = s.next_assignments(30);
        assert!(pairs.iter().all(|(task, _)| task.starts_with("wf-1/a.")));
    }

    #[test]
    fn workers_cap_limits_distinct_nodes() {
        let mut s = two_node_scheduler();
        let wf = workflow(
            "version: 1\nexperiments:\n  t:\n    command: echo\n    workers: 1\n    samples: 4\n",
            "wf-1",
        );
        s.submit(wf, 20).unwrap();
        let pairs = s.next_assignments(30);
        assert_eq!(pairs.len(), 1, "workers: 1 keeps the experiment on one node");
    }

    #[test]
    fn completing_dependency_releases_successor() {
        let mut s = two_node_scheduler();
        s.submit(workflow(CHAIN, "wf-1"), 20).unwrap();
        s.tick(30);
        let events = s
            .task_finished("wf-1/a.0", "n1", 1, AttemptOutcome::Success, 40)
            .unwrap();
        assert_eq!(released(&events), vec!["b"]);
    }

    #[test]
    fn workflow_completes_when_all_tasks_succeed() {
        let mut s = two_node_scheduler();
        s.submit(workflow(CHAIN, "wf-1"), 20).unwrap();
        s.tick(30);
        s.task_finished("wf-1/a.0", "n1", 1, AttemptOutcome::Success, 40)
            .unwrap();
        s.tick(50);
        let events = s
            .task_finished("wf-1/b.0", "n1", 1, AttemptOutcome::Success, 60)
            .unwrap();
        assert!(events.iter().any(|e| matches!(
            e,
            SchedulerEvent::WorkflowPhaseChanged {
                phase: Phase::MonitoringComplete,
                ..
            }
        )));
        let status = s.status("wf-1").unwrap();
        assert_eq!(status.phase, Phase::MonitoringComplete);
        assert!(status.finished_at_ms.is_some());
    }

    #[test]
    fn retry_budget_then_failed_workflow() {
        let mut s = two_node_scheduler();
        let wf = workflow(
            "version: 1\nexperiments:\n  t:\n    command: exit 1\n    workers: 2\n",
            "wf-1",
        );
        s.submit(wf, 20).unwrap();
        for round in 0..3u64 {
            let now = 30 + round * 10;
            let assigned = s
                .tick(now)
                .iter()
                .filter(|e| matches!(e, SchedulerEvent::TaskAssigned { .. }))
                .count();
            assert_eq!(assigned, 1, "attempt {} gets scheduled", round + 1);
            let node = s.task("wf-1/t.0").unwrap().attempts.last().unwrap().node_id.clone();
            s.task_finished(
                "wf-1/t.0",
                &node,
                round as u32 + 1,
                AttemptOutcome::Failure { exit_code: 1 },
                now + 5,
            )
            .unwrap();
        }
        let task = s.task("wf-1/t.0").unwrap();
        assert_eq!(task.state, TaskState::Failed);
        assert_eq!(task.attempts.len(), 3);
        assert_eq!(s.workflow("wf-1").unwrap().phase, Phase::Failed);
        // A failed workflow never releases or assigns anything again.
        assert!(s.next_assignments(200).is_empty());
    }

    #[test]
    fn failed_workflow_never_releases_dependents() {
        let mut s = two_node_scheduler();
        let wf = workflow(
            "version: 1\nexperiments:\n  a:\n    command: exit 1\n    workers: 2\n  b:\n    command: echo\n    workers: 2\n    depends_on: [a]\n",
            "wf-1",
        );
        s.submit(wf, 20).unwrap();
        for round in 0..3u64 {
            s.tick(30 + round * 10);
            s.task_finished(
                "wf-1/a.0",
                &s.task("wf-1/a.0").unwrap().attempts.last().unwrap().node_id.clone(),
                round as u32 + 1,
                AttemptOutcome::Failure { exit_code: 1 },
                35 + round * 10,
            )
            .unwrap();
        }
        assert_eq!(s.workflow("wf-1").unwrap().phase, Phase::Failed);
        let status = s.status("wf-1").unwrap();
        assert_eq!(status.experiments["b"]["pending"], 1);
    }

    #[test]
    fn node_death_returns_tasks_with_identical_command() {
        let mut s = two_node_scheduler();
        let wf = workflow(
            "version: 1\nexperiments:\n  t:\n    command: \"echo {{x}}\"\n    workers: 2\n    params:\n      x: { values: [alpha] }\n",
            "wf-1",
        );
        s.submit(wf, 20).unwrap();
        s.tick(30);
        let first = s.task("wf-1/t.0").unwrap();
        let first_node = first.attempts[0].node_id.clone();
        let first_command = first.rendered_command.clone();

        // n1 stops heartbeating; n2 stays alive.
        let other = if first_node == "n1" { "n2" } else { "n1" };
        s.heartbeat(other, 0, 2, 3_500).unwrap();
        let events = s.tick(4_000);
        assert!(events
            .iter()
            .any(|e| matches!(e, SchedulerEvent::NodeDead { node_id, .. } if *node_id == first_node)));

        let task = s.task("wf-1/t.0").unwrap();
        assert_eq!(task.attempts[0].outcome, Some(AttemptOutcome::NodeLost));
        // Reassigned to the surviving node with a byte-identical command.
        let reassigned: Vec<_> = events
            .iter()
            .filter_map(|e| match e {
                SchedulerEvent::TaskAssigned {
                    node_id, command, ..
                } => Some((node_id.clone(), command.clone())),
                _ => None,
            })
            .collect();
        assert_eq!(reassigned.len(), 1);
        assert_eq!(reassigned[0].0, other);
        assert_eq!(reassigned[0].1, first_command);
        assert_eq!(task.attempts.len(), 2);
        assert_eq!(task.attempts[1].number, 2);
    }

    #[test]
    fn node_loss_does_not_consume_retry_budget() {
        let mut s = two_node_scheduler();
        let wf = workflow(
            "version: 1\nexperiments:\n  t:\n    command: echo\n    workers: 2\n",
            "wf-1",
        );
        s.submit(wf, 20).unwrap();
        s.tick(30);
        // Lose nodes repeatedly; more times than max_attempts_per_task.
        for round in 0..5u64 {
            let now = 4_000 + round * 4_000;
            let replacement = format!("r{round}");
            s.register_node(&replacement, 1, true, "cpu-small", now).unwrap();
            s.heartbeat(&replacement, 0, 1, now).unwrap();
            // Everyone except the replacement missed heartbeats by `now`.
            s.tick(now);
        }
        let task = s.task("wf-1/t.0").unwrap();
        assert_eq!(task.attempts.len(), 6);
        assert_ne!(task.state, TaskState::Failed);
        assert!(task
            .attempts
            .iter()
            .take(5)
            .all(|a| a.outcome == Some(AttemptOutcome::NodeLost)));
    }

    #[test]
    fn stale_report_from_dead_node_is_rejected() {
        let mut s = two_node_scheduler();
        let wf = workflow(
            "version: 1\nexperiments:\n  t:\n    command: echo\n    workers: 2\n",
            "wf-1",
        );
        s.submit(wf, 20).unwrap();
        s.tick(30);
        let node = s.task("wf-1/t.0").unwrap().attempts[0].node_id.clone();
        let other = if node == "n1" { "n2" } else { "n1" };
        s.heartbeat(other, 0, 2, 3_500).unwrap();
        s.tick(4_000); // node declared dead, task rescheduled on `other`

        // The dead node's stale success arrives late: rejected, no effect.
        let err = s
            .task_finished("wf-1/t.0", &node, 1, AttemptOutcome::Success, 4_100)
            .unwrap_err();
        assert!(matches!(err, SchedulerError::UnknownAttempt { .. }));
        assert_ne!(s.task("wf-1/t.0").unwrap().state, TaskState::Succeeded);

        // The live reattempt completes it exactly once.
        s.task_finished("wf-1/t.0", other, 2, AttemptOutcome::Success, 4_200)
            .unwrap();
        assert_eq!(s.task("wf-1/t.0").unwrap().state, TaskState::Succeeded);
    }

    #[test]
    fn all_nodes_dead_stalls_without_failing() {
        let mut s = two_node_scheduler();
        let wf = workflow(
            "version: 1\nexperiments:\n  t:\n    command: echo\n    workers: 2\n    samples: 2\n",
            "wf-1",
        );
        s.submit(wf, 20).unwrap();
        s.tick(30);
        s.tick(10_000); // both nodes time out
        assert_eq!(s.live_nodes().count(), 0);
        let status = s.status("wf-1").unwrap();
        assert_eq!(status.phase, Phase::Executing);
        assert_eq!(status.experiments["t"]["rescheduled"], 2);
        // A fresh node picks the work back up.
        s.register_node("n3", 2, false, "cpu-small", 10_100).unwrap();
        s.heartbeat("n3", 0, 1, 10_100).unwrap();
        assert_eq!(s.tick(10_200).iter().filter(|e| matches!(e, SchedulerEvent::TaskAssigned { .. })).count(), 2);
    }

    #[test]
    fn status_counts_partition_tasks() {
        let mut s = two_node_scheduler();
        let wf = workflow(
            "version: 1\nexperiments:\n  t:\n    command: echo\n    workers: 2\n    samples: 5\n",
            "wf-1",
        );
        s.submit(wf, 20).unwrap();
        let status = s.status("wf-1").unwrap();
        assert_eq!(status.experiments["t"]["pending"], 5);
        s.tick(30);
        let status = s.status("wf-1").unwrap();
        let total: usize = status.experiments["t"].values().sum();
        assert_eq!(total, 5);
        assert_eq!(status.phase, Phase::Executing);
        assert!(matches!(s.status("nope"), Err(SchedulerError::UnknownWorkflow(_))));
    }

    #[test]
    fn replaying_the_event_log_reconstructs_state() {
        let mut s = Scheduler::new(SchedulerConfig::default()).unwrap();
        let mut log = Vec::new();
        log.extend(s.register_node("n1", 1, false, "cpu-small", 0).unwrap());
        log.extend(s.register_node("n2", 1, false, "cpu-small", 0).unwrap());
        log.extend(s.heartbeat("n1", 0, 1, 10).unwrap());
        log.extend(s.heartbeat("n2", 0, 1, 10).unwrap());
        log.extend(s.submit(workflow(CHAIN, "wf-1"), 20).unwrap());
        log.extend(s.tick(30));
        log.extend(
            s.task_finished("wf-1/a.0", "n1", 1, AttemptOutcome::Success, 40)
                .unwrap(),
        );

        let mut replayed = Scheduler::new(SchedulerConfig::default()).unwrap();
        for event in &log {
            replayed.apply(event);
        }
        assert_eq!(s.status("wf-1").unwrap(), replayed.status("wf-1").unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(Scheduler::new(SchedulerConfig {
            heartbeat_interval_ms: 1000,
            liveness_timeout_ms: 1000,
            ..Default::default()
        })
        .is_err());
        assert!(Scheduler::new(SchedulerConfig {
            max_attempts_per_task: 0,
            ..Default::default()
        })
        .is_err());
    }
}
