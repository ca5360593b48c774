//! The node state machine and the real (TCP) node worker.

use std::collections::{BTreeMap, VecDeque};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;

use super::runner::{AssignedTask, TaskRunner};
use super::{FaultPlan, FaultRoller, LogRecord, LogSource};
use crate::chunkfs;
use crate::clock::{Clock, Millis, SystemClock};
use crate::objectstore::SharedStore;
use crate::wire::{self, MasterMessage, NodeMessage, WireError};

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("master unreachable at {0}")]
    MasterUnreachable(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub node_id: String,
    pub capacity: u32,
    pub spot: bool,
    pub profile: String,
    pub heartbeat_interval_ms: u64,
    pub fault_plan: FaultPlan,
}

impl NodeConfig {
    pub fn new(node_id: impl Into<String>, capacity: u32) -> Self {
        Self {
            node_id: node_id.into(),
            capacity,
            spot: false,
            profile: "cpu-small".to_string(),
            heartbeat_interval_ms: 1_000,
            fault_plan: FaultPlan::none(),
        }
    }
}

/// One heartbeat's worth of node activity.
pub enum NodeTick {
    /// The fault plan fired: the node halted abruptly, nothing was sent.
    Halted,
    Messages(Vec<NodeMessage>),
}

/// Node-side state machine, shared by the real worker loop and the
/// simulation driver. Each call to [`NodeCore::tick`] is one heartbeat:
/// consult the fault plan, report completions, sample utilization, beat.
pub struct NodeCore {
    config: NodeConfig,
    runner: Box<dyn TaskRunner>,
    roller: FaultRoller,
    workdir: PathBuf,
    seq: u64,
    backlog: VecDeque<AssignedTask>,
    halted: bool,
    /// Per-source monotonic timestamp guard.
    last_ts: BTreeMap<&'static str, Millis>,
}

impl NodeCore {
    pub fn new(config: NodeConfig, runner: Box<dyn TaskRunner>, workdir: PathBuf) -> Self {
        let roller = config.fault_plan.roller(&config.node_id);
        Self {
            config,
            runner,
            roller,
            workdir,
            seq: 0,
            backlog: VecDeque::new(),
            halted: false,
            last_ts: BTreeMap::new(),
        }
    }

    pub fn node_id(&self) -> &str {
        &self.config.node_id
    }

    pub fn halted(&self) -> bool {
        self.halted
    }

    pub fn register_message(&self) -> NodeMessage {
        NodeMessage::Register {
            node_id: self.config.node_id.clone(),
            capacity: self.config.capacity,
            spot: self.config.spot,
        }
    }

    pub fn running(&self) -> usize {
        self.runner.running() + self.backlog.len()
    }

    /// Accept an assignment; runs immediately if a slot is free, otherwise
    /// queued until one frees up (the master should never overshoot, this
    /// keeps the capacity invariant on the node side regardless).
    pub fn on_assign(&mut self, task: AssignedTask, now: Millis) -> Vec<NodeMessage> {
        if self.halted {
            return Vec::new();
        }
        let mut out = Vec::new();
        out.push(self.system_log(
            now,
            Some(task.task_id.clone()),
            format!("assigned attempt {} of {}", task.attempt, task.task_id),
        ));
        self.backlog.push_back(task);
        self.drain_backlog(now);
        out
    }

    fn drain_backlog(&mut self, now: Millis) {
        while self.runner.running() < self.config.capacity as usize {
            let Some(task) = self.backlog.pop_front() else {
                break;
            };
            self.runner.start(task, &self.workdir, now);
        }
        debug_assert!(self.runner.running() <= self.config.capacity as usize);
    }

    /// One heartbeat.
    pub fn tick(&mut self, now: Millis) -> NodeTick {
        if self.halted {
            return NodeTick::Halted;
        }
        if self.roller.should_die(now) {
            // Spot preemption: silent death, lose everything in flight.
            self.halted = true;
            self.runner.halt_all();
            self.backlog.clear();
            return NodeTick::Halted;
        }

        let mut out = Vec::new();
        for completion in self.runner.poll(now) {
            for (ts, line) in &completion.output {
                out.push(NodeMessage::Log {
                    record: self.stamped(
                        LogSource::Application,
                        Some(completion.task_id.clone()),
                        *ts,
                        line.clone(),
                    ),
                });
            }
            out.push(self.system_log(
                now,
                Some(completion.task_id.clone()),
                format!(
                    "attempt {} of {} finished: {:?}",
                    completion.attempt, completion.task_id, completion.outcome
                ),
            ));
            out.push(NodeMessage::Result {
                task_id: completion.task_id,
                outcome: completion.outcome,
                attempt: completion.attempt,
            });
        }
        self.drain_backlog(now);

        let load = self.running() as u32;
        out.push(NodeMessage::Log {
            record: self.stamped(
                LogSource::Utilization,
                None,
                now,
                format!("load {load}/{}", self.config.capacity),
            ),
        });
        self.seq += 1;
        out.push(NodeMessage::Heartbeat {
            node_id: self.config.node_id.clone(),
            load,
            seq: self.seq,
        });
        NodeTick::Messages(out)
    }

    fn system_log(&mut self, now: Millis, task_id: Option<String>, line: String) -> NodeMessage {
        NodeMessage::Log {
            record: self.stamped(LogSource::System, task_id, now, line),
        }
    }

    fn stamped(
        &mut self,
        source: LogSource,
        task_id: Option<String>,
        at_ms: Millis,
        line: String,
    ) -> LogRecord {
        let key = match source {
            LogSource::Application => "application",
            LogSource::Utilization => "utilization",
            LogSource::System => "system",
        };
        let floor = self.last_ts.entry(key).or_insert(0);
        let at_ms = at_ms.max(*floor);
        *floor = at_ms;
        LogRecord {
            source,
            node_id: self.config.node_id.clone(),
            task_id,
            at_ms,
            line,
        }
    }
}

// ---------------------------------------------------------------------------
// Real worker loop
// ---------------------------------------------------------------------------

pub struct NodeHandle {
    pub node_id: String,
    shutdown: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
}

impl NodeHandle {
    /// Graceful stop (test teardown, not part of the failure model).
    pub fn shutdown(mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }

    pub fn is_finished(&self) -> bool {
        self.join.as_ref().map(|j| j.is_finished()).unwrap_or(true)
    }
}

/// Connect to the master, register, and run the heartbeat loop on a
/// background thread. Tasks execute as real subprocesses under
/// `workdir/tasks/`; datasets from `store` are materialized under
/// `workdir/data/` before the first task runs and exposed to commands as
/// `HYPER_DATASET_ROOT`.
pub fn start_node(
    master_addr: &str,
    config: NodeConfig,
    workdir: PathBuf,
    store: Option<SharedStore>,
) -> Result<NodeHandle, NodeError> {
    let stream = connect_with_backoff(master_addr, 6)?;
    let mut writer = stream.try_clone()?;
    let reader = stream;

    std::fs::create_dir_all(&workdir)?;
    let mut core = NodeCore::new(
        config.clone(),
        Box::new(super::runner::SubprocessRunner::new()),
        workdir.clone(),
    );
    wire::write_frame(&mut writer, &core.register_message())?;

    // Reader thread: master pushes Assign messages.
    let (assign_tx, assign_rx) = mpsc::channel::<MasterMessage>();
    let reader_shutdown = Arc::new(AtomicBool::new(false));
    {
        let reader_shutdown = Arc::clone(&reader_shutdown);
        let mut reader = reader;
        std::thread::spawn(move || loop {
            if reader_shutdown.load(Ordering::SeqCst) {
                return;
            }
            match wire::read_frame::<_, MasterMessage>(&mut reader) {
                Ok(msg) => {
                    if assign_tx.send(msg).is_err() {
                        return;
                    }
                }
                Err(_) => return,
            }
        });
    }

    let shutdown = Arc::new(AtomicBool::new(false));
    let loop_shutdown = Arc::clone(&shutdown);
    let node_id = config.node_id.clone();
    let join = std::thread::spawn(move || {
        let clock = SystemClock;
        let mut materialized = false;
        let mut dataset_root: Option<PathBuf> = None;
        loop {
            if loop_shutdown.load(Ordering::SeqCst) {
                return;
            }
            let now = clock.now_ms();
            let mut outbound = Vec::new();
            while let Ok(MasterMessage::Assign {
                task_id,
                command,
                env,
            }) = assign_rx.try_recv()
            {
                if !materialized {
                    materialized = true;
                    if let Some(store) = &store {
                        let (root, mut logs) =
                            materialize_datasets(store, &workdir, &config.node_id, now);
                        dataset_root = root;
                        outbound.append(&mut logs);
                    }
                }
                let mut env: BTreeMap<String, String> = env;
                if let Some(root) = &dataset_root {
                    env.insert(
                        "HYPER_DATASET_ROOT".to_string(),
                        root.to_string_lossy().into_owned(),
                    );
                }
                outbound.extend(core.on_assign(
                    AssignedTask {
                        task_id,
                        attempt: env
                            .get("HYPER_ATTEMPT")
                            .and_then(|a| a.parse().ok())
                            .unwrap_or(1),
                        command,
                        env,
                    },
                    now,
                ));
            }
            match core.tick(now) {
                NodeTick::Halted => {
                    // Silent spot termination: drop the connection, say
                    // nothing. The master notices via missed heartbeats.
                    reader_shutdown.store(true, Ordering::SeqCst);
                    return;
                }
                NodeTick::Messages(msgs) => outbound.extend(msgs),
            }
            for msg in outbound {
                if wire::write_frame(&mut writer, &msg).is_err() {
                    // Master gone; nothing sensible left to do.
                    reader_shutdown.store(true, Ordering::SeqCst);
                    return;
                }
            }
            std::thread::sleep(Duration::from_millis(config.heartbeat_interval_ms));
        }
    });

    Ok(NodeHandle {
        node_id,
        shutdown,
        join: Some(join),
    })
}

fn connect_with_backoff(addr: &str, tries: u32) -> Result<TcpStream, NodeError> {
    let mut delay = Duration::from_millis(50);
    for attempt in 0..tries {
        match TcpStream::connect(addr) {
            Ok(stream) => {
                stream.set_nodelay(true).ok();
                return Ok(stream);
            }
            Err(_) if attempt + 1 < tries => {
                std::thread::sleep(delay);
                delay = (delay * 2).min(Duration::from_secs(1));
            }
            Err(_) => break,
        }
    }
    Err(NodeError::MasterUnreachable(addr.to_string()))
}

/// Materialize every dataset in the store into `workdir/data/<dataset>/`.
fn materialize_datasets(
    store: &SharedStore,
    workdir: &Path,
    node_id: &str,
    now: Millis,
) -> (Option<PathBuf>, Vec<NodeMessage>) {
    let root = workdir.join("data");
    let mut logs = Vec::new();
    let mut log = |line: String| {
        logs.push(NodeMessage::Log {
            record: LogRecord {
                source: LogSource::System,
                node_id: node_id.to_string(),
                task_id: None,
                at_ms: now,
                line,
            },
        });
    };
    let buckets = match store.buckets() {
        Ok(b) => b,
        Err(e) => {
            log(format!("dataset listing failed: {e}"));
            return (None, logs);
        }
    };
    for dataset in buckets {
        match chunkfs::open_dataset(&dataset, Arc::clone(store), 64) {
            Ok(handle) => {
                let dest = root.join(&dataset);
                match chunkfs::materialize_to_dir(&handle, &dest) {
                    Ok(()) => log(format!(
                        "materialized dataset {dataset} ({} files)",
                        handle.manifest().files.len()
                    )),
                    Err(e) => log(format!("materializing {dataset} failed: {e}")),
                }
            }
            // Buckets without a readable manifest are not datasets.
            Err(_) => continue,
        }
    }
    (Some(root), logs)
}
