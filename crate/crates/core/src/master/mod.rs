//! The control-plane service.
//!
//! The master owns the scheduler state machine, persists every scheduler
//! event to an append-only log (newline-delimited JSON), takes periodic
//! state snapshots into the object store (canonical JSON with a SHA-256
//! digest trailer line), collects node logs, and answers client requests.
//! Restoring is snapshot + replay of the event-log suffix: because all
//! scheduler mutations are event applications, the restored master is
//! field-for-field identical to the pre-crash one.

mod server;

pub use server::{serve, MasterHandle};

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunkfs::{self, ChunkFsError, DEFAULT_CHUNK_TARGET};
use crate::clock::{Clock, Millis};
use crate::cluster::{LogRecord, LogSource};
use crate::objectstore::{ObjectKey, SharedStore, StoreError};
use crate::recipe::{self, RecipeError};
use crate::scheduler::{
    Scheduler, SchedulerConfig, SchedulerError, SchedulerEvent, WorkflowStatus,
};
use crate::util::{canonical_json, sha256_hex};
use crate::wire::{ClientRequest, ClientResponse, ErrorCode, LogFilter, MasterMessage, NodeMessage};

#[derive(Debug, Error)]
pub enum MasterError {
    #[error(transparent)]
    Recipe(#[from] RecipeError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    ChunkFs(#[from] ChunkFsError),
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("event log I/O failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct MasterConfig {
    pub scheduler: SchedulerConfig,
    /// 0 disables periodic snapshots (explicit Snapshot requests still work).
    pub snapshot_interval_ms: u64,
    pub snapshot_key: ObjectKey,
    pub default_chunk_target: u64,
}

impl Default for MasterConfig {
    fn default() -> Self {
        Self {
            scheduler: SchedulerConfig::default(),
            snapshot_interval_ms: 10_000,
            snapshot_key: ObjectKey::new("_hyper", "snapshot").expect("static key is valid"),
            default_chunk_target: DEFAULT_CHUNK_TARGET,
        }
    }
}

// ---------------------------------------------------------------------------
// Event log persistence
// ---------------------------------------------------------------------------

/// Append-only sink/source for serialized scheduler events, one JSON object
/// per line.
pub trait EventLog: Send {
    fn append(&mut self, line: &str) -> std::io::Result<()>;
    fn lines(&self) -> std::io::Result<Vec<String>>;
    fn len(&self) -> u64;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub type SharedEventLog = Arc<Mutex<dyn EventLog>>;

#[derive(Debug, Default)]
pub struct MemEventLog {
    lines: Vec<String>,
}

impl MemEventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shared() -> SharedEventLog {
        Arc::new(Mutex::new(Self::new()))
    }
}

impl EventLog for MemEventLog {
    fn append(&mut self, line: &str) -> std::io::Result<()> {
        self.lines.push(line.to_string());
        Ok(())
    }

    fn lines(&self) -> std::io::Result<Vec<String>> {
        Ok(self.lines.clone())
    }

    fn len(&self) -> u64 {
        self.lines.len() as u64
    }
}

pub struct FileEventLog {
    path: PathBuf,
    writer: std::io::BufWriter<std::fs::File>,
    count: u64,
}

impl FileEventLog {
    /// Opens (or creates) the log, counting any existing records so appends
    /// continue the sequence.
    pub fn open(path: impl Into<PathBuf>) -> std::io::Result<Self> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let count = match std::fs::read_to_string(&path) {
            Ok(content) => content.lines().count() as u64,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => 0,
            Err(e) => return Err(e),
        };
        let file = std::fs::OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            writer: std::io::BufWriter::new(file),
            count,
        })
    }

    pub fn shared(path: impl Into<PathBuf>) -> std::io::Result<SharedEventLog> {
        Ok(Arc::new(Mutex::new(Self::open(path)?)))
    }
}

impl EventLog for FileEventLog {
    fn append(&mut self, line: &str) -> std::io::Result<()> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        self.count += 1;
        Ok(())
    }

    fn lines(&self) -> std::io::Result<Vec<String>> {
        Ok(std::fs::read_to_string(&self.path)?
            .lines()
            .map(str::to_string)
            .collect())
    }

    fn len(&self) -> u64 {
        self.count
    }
}

// ---------------------------------------------------------------------------
// Log collection
// ---------------------------------------------------------------------------

/// Arrival-ordered store of collected node logs, optionally file-backed.
pub struct LogStore {
    records: Vec<LogRecord>,
    file: Option<std::io::BufWriter<std::fs::File>>,
}

impl LogStore {
    pub fn in_memory() -> Self {
        Self {
            records: Vec::new(),
            file: None,
        }
    }

    /// File-backed store; existing records are reloaded on open.
    pub fn open_file(path: impl Into<PathBuf>) -> std::io::Result<Self> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let records = match std::fs::read_to_string(&path) {
            Ok(content) => content
                .lines()
                .filter_map(|l| serde_json::from_str(l).ok())
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e),
        };
        let file = std::fs::OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            records,
            file: Some(std::io::BufWriter::new(file)),
        })
    }

    pub fn append(&mut self, record: LogRecord) -> std::io::Result<()> {
        if let Some(file) = &mut self.file {
            serde_json::to_writer(&mut *file, &record)?;
            file.write_all(b"\n")?;
            file.flush()?;
        }
        self.records.push(record);
        Ok(())
    }

    /// Records belonging to the workflow (its tasks' records plus node-level
    /// records without a task), filtered, merged in timestamp order. The
    /// sort is stable so equal timestamps keep arrival order.
    pub fn query(&self, workflow_id: &str, filter: &LogFilter) -> Vec<LogRecord> {
        let prefix = format!("{workflow_id}/");
        let mut out: Vec<LogRecord> = self
            .records
            .iter()
            .filter(|r| {
                r.task_id
                    .as_deref()
                    .map(|t| t.starts_with(&prefix))
                    .unwrap_or(true)
            })
            .filter(|r| filter.matches(r))
            .cloned()
            .collect();
        out.sort_by_key(|r| r.at_ms);
        out
    }
}

// ---------------------------------------------------------------------------
// Snapshots
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SnapshotPayload {
    event_offset: u64,
    scheduler: Scheduler,
}

/// Canonical JSON payload plus a digest trailer line.
fn seal_snapshot(payload: &SnapshotPayload) -> Vec<u8> {
    let body = canonical_json(payload);
    let digest = sha256_hex(body.as_bytes());
    format!("{body}\n{digest}\n").into_bytes()
}

fn open_snapshot(bytes: &[u8]) -> Result<SnapshotPayload, MasterError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| MasterError::CorruptSnapshot("not UTF-8".into()))?;
    let (body, trailer) = text
        .split_once('\n')
        .ok_or_else(|| MasterError::CorruptSnapshot("missing digest trailer".into()))?;
    if sha256_hex(body.as_bytes()) != trailer.trim_end() {
        return Err(MasterError::CorruptSnapshot("digest mismatch".into()));
    }
    serde_json::from_str(body).map_err(|e| MasterError::CorruptSnapshot(e.to_string()))
}

// ---------------------------------------------------------------------------
// Master
// ---------------------------------------------------------------------------

pub struct Master {
    config: MasterConfig,
    scheduler: Scheduler,
    store: SharedStore,
    event_log: SharedEventLog,
    logs: LogStore,
    clock: Arc<dyn Clock>,
    last_snapshot_ms: Option<Millis>,
}

impl Master {
    pub fn new(
        config: MasterConfig,
        store: SharedStore,
        event_log: SharedEventLog,
        logs: LogStore,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, MasterError> {
        let scheduler = Scheduler::new(config.scheduler)?;
        Ok(Self {
            config,
            scheduler,
            store,
            event_log,
            logs,
            clock,
            last_snapshot_ms: None,
        })
    }

    /// Rebuild a master from its durable pieces: the latest snapshot in the
    /// store (if any) plus the event-log suffix past the snapshot offset.
    pub fn restore(
        config: MasterConfig,
        store: SharedStore,
        event_log: SharedEventLog,
        logs: LogStore,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, MasterError> {
        let (mut scheduler, offset) = match store.get(&config.snapshot_key) {
            Ok(bytes) => {
                let payload = open_snapshot(&bytes)?;
                (payload.scheduler, payload.event_offset)
            }
            Err(StoreError::NotFound(_)) => (Scheduler::new(config.scheduler)?, 0),
            Err(e) => return Err(e.into()),
        };
        let lines = event_log.lock().unwrap().lines()?;
        for line in lines.iter().skip(offset as usize) {
            let event: SchedulerEvent = serde_json::from_str(line)
                .map_err(|e| MasterError::CorruptSnapshot(format!("bad event record: {e}")))?;
            scheduler.apply(&event);
        }
        Ok(Self {
            config,
            scheduler,
            store,
            event_log,
            logs,
            clock,
            last_snapshot_ms: None,
        })
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.scheduler
    }

    pub fn store(&self) -> &SharedStore {
        &self.store
    }

    pub fn event_log(&self) -> SharedEventLog {
        Arc::clone(&self.event_log)
    }

    fn now(&self) -> Millis {
        self.clock.now_ms()
    }

    fn persist(&mut self, events: &[SchedulerEvent]) -> Result<(), MasterError> {
        let mut log = self.event_log.lock().unwrap();
        for event in events {
            log.append(&serde_json::to_string(event).expect("events serialize"))?;
        }
        debug_assert_eq!(log.len(), self.scheduler.events_applied());
        Ok(())
    }

    /// Parse, expand and register a recipe. Returns the assigned workflow id
    /// and any validation warnings.
    pub fn submit_recipe(
        &mut self,
        yaml: &str,
        seed: u64,
    ) -> Result<(String, Vec<String>), MasterError> {
        let parsed = recipe::parse_recipe(yaml)?;
        let workflow = recipe::build_workflow(&parsed, seed)?;
        // Identity is per submission: the same recipe submitted twice gets
        // two distinct workflows.
        let id = format!("wf-{:04}", self.scheduler.workflow_ids().len() + 1);
        let workflow = workflow.with_id(&id);
        let now = self.now();
        let events = self.scheduler.submit(workflow, now)?;
        self.persist(&events)?;
        Ok((id, parsed.warnings))
    }

    /// Feed one node message through the state machine. Stale results and
    /// heartbeats from unknown/dead nodes are logged and dropped; duplicate
    /// registration surfaces as an error so the transport can reject the
    /// connection.
    pub fn handle_node_message(&mut self, msg: NodeMessage) -> Result<(), MasterError> {
        let now = self.now();
        match msg {
            NodeMessage::Register {
                node_id,
                capacity,
                spot,
            } => {
                let events = self
                    .scheduler
                    .register_node(&node_id, capacity, spot, "default", now)?;
                self.persist(&events)?;
            }
            NodeMessage::Heartbeat { node_id, load, seq } => {
                match self.scheduler.heartbeat(&node_id, load, seq, now) {
                    Ok(events) => self.persist(&events)?,
                    Err(SchedulerError::UnknownNode(_)) => self.logs.append(LogRecord {
                        source: LogSource::System,
                        node_id,
                        task_id: None,
                        at_ms: now,
                        line: "heartbeat from unknown or dead node ignored".into(),
                    })?,
                    Err(e) => return Err(e.into()),
                }
            }
            NodeMessage::Result {
                task_id,
                outcome,
                attempt,
            } => {
                // The reporting node is the one holding the in-flight
                // attempt; recover it from the task record.
                let node_id = self
                    .scheduler
                    .task(&task_id)
                    .and_then(|t| t.attempts.last())
                    .map(|a| a.node_id.clone())
                    .unwrap_or_default();
                match self
                    .scheduler
                    .task_finished(&task_id, &node_id, attempt, outcome, now)
                {
                    Ok(events) => self.persist(&events)?,
                    Err(SchedulerError::UnknownAttempt { .. })
                    | Err(SchedulerError::UnknownWorkflow(_)) => {
                        self.logs.append(LogRecord {
                            source: LogSource::System,
                            node_id,
                            task_id: Some(task_id),
                            at_ms: now,
                            line: format!("stale result for attempt {attempt} ignored"),
                        })?;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            NodeMessage::Log { record } => self.logs.append(record)?,
        }
        Ok(())
    }

    /// Periodic work: liveness checks, new assignments (returned as
    /// directives for the transport to push), periodic snapshot.
    pub fn tick(&mut self) -> Result<Vec<(String, MasterMessage)>, MasterError> {
        let now = self.now();
        let events = self.scheduler.tick(now);
        self.persist(&events)?;
        let directives = events
            .iter()
            .filter_map(|e| match e {
                SchedulerEvent::TaskAssigned {
                    task_id,
                    node_id,
                    attempt,
                    command,
                    ..
                } => {
                    let experiment = task_id
                        .split_once('/')
                        .map(|(_, rest)| rest.rsplit_once('.').map(|(e, _)| e).unwrap_or(rest))
                        .unwrap_or("");
                    let env = std::collections::BTreeMap::from([
                        ("HYPER_TASK_ID".to_string(), task_id.clone()),
                        ("HYPER_EXPERIMENT".to_string(), experiment.to_string()),
                        ("HYPER_ATTEMPT".to_string(), attempt.to_string()),
                    ]);
                    Some((
                        node_id.clone(),
                        MasterMessage::Assign {
                            task_id: task_id.clone(),
                            command: command.clone(),
                            env,
                        },
                    ))
                }
                _ => None,
            })
            .collect();

        if self.config.snapshot_interval_ms > 0 {
            let due = self
                .last_snapshot_ms
                .map(|t| now.saturating_sub(t) >= self.config.snapshot_interval_ms)
                .unwrap_or(true);
            if due {
                self.snapshot()?;
            }
        }
        Ok(directives)
    }

    /// Write a consistent state snapshot to the object store; returns the
    /// event-log offset it covers.
    pub fn snapshot(&mut self) -> Result<u64, MasterError> {
        let offset = self.event_log.lock().unwrap().len();
        debug_assert_eq!(offset, self.scheduler.events_applied());
        let payload = SnapshotPayload {
            event_offset: offset,
            scheduler: self.scheduler.clone(),
        };
        self.store.put(&self.config.snapshot_key, &seal_snapshot(&payload))?;
        self.last_snapshot_ms = Some(self.now());
        Ok(offset)
    }

    pub fn get_status(&self, workflow_id: &str) -> Result<WorkflowStatus, MasterError> {
        Ok(self.scheduler.status(workflow_id)?)
    }

    pub fn get_logs(
        &self,
        workflow_id: &str,
        filter: &LogFilter,
    ) -> Result<Vec<LogRecord>, MasterError> {
        if self.scheduler.workflow(workflow_id).is_none() {
            return Err(SchedulerError::UnknownWorkflow(workflow_id.to_string()).into());
        }
        Ok(self.logs.query(workflow_id, filter))
    }

    pub fn upload_dataset(
        &mut self,
        local_root: &Path,
        dataset: &str,
        chunk_target: u64,
    ) -> Result<chunkfs::UploadReport, MasterError> {
        let target = if chunk_target == 0 {
            self.config.default_chunk_target
        } else {
            chunk_target
        };
        Ok(chunkfs::upload_tree(local_root, dataset, target, self.store.as_ref())?)
    }

    /// Client API entry point shared by the TCP server and in-process use.
    pub fn handle_client(&mut self, req: ClientRequest) -> ClientResponse {
        match req {
            ClientRequest::SubmitRecipe { yaml, seed } => {
                match self.submit_recipe(&yaml, seed) {
                    Ok((workflow_id, warnings)) => ClientResponse::Submitted {
                        workflow_id,
                        warnings,
                    },
                    Err(e) => error_response(e),
                }
            }
            ClientRequest::GetStatus { workflow_id } => match self.get_status(&workflow_id) {
                Ok(status) => ClientResponse::Status { status },
                Err(e) => error_response(e),
            },
            ClientRequest::GetLogs {
                workflow_id,
                filter,
            } => match self.get_logs(&workflow_id, &filter) {
                Ok(records) => ClientResponse::Logs { records },
                Err(e) => error_response(e),
            },
            ClientRequest::UploadDataset {
                local_root,
                dataset,
                chunk_target,
            } => match self.upload_dataset(Path::new(&local_root), &dataset, chunk_target) {
                Ok(report) => ClientResponse::Uploaded {
                    dataset,
                    files: report.manifest.files.len(),
                    chunks: report.manifest.chunks.len(),
                    chunks_uploaded: report.chunks_uploaded,
                    chunks_skipped: report.chunks_skipped,
                },
                Err(e) => error_response(e),
            },
            ClientRequest::Snapshot => match self.snapshot() {
                Ok(event_offset) => ClientResponse::SnapshotTaken { event_offset },
                Err(e) => error_response(e),
            },
        }
    }
}

fn error_response(e: MasterError) -> ClientResponse {
    let code = match &e {
        MasterError::Recipe(_) => ErrorCode::Validation,
        MasterError::Scheduler(SchedulerError::UnknownWorkflow(_)) => ErrorCode::NotFound,
        MasterError::Scheduler(_) => ErrorCode::Validation,
        MasterError::Store(StoreError::NotFound(_)) => ErrorCode::NotFound,
        MasterError::Store(StoreError::Unavailable) => ErrorCode::Unavailable,
        MasterError::ChunkFs(ChunkFsError::Store(StoreError::NotFound(_))) => ErrorCode::NotFound,
        MasterError::ChunkFs(ChunkFsError::FileNotInManifest(_)) => ErrorCode::NotFound,
        MasterError::ChunkFs(ChunkFsError::Store(StoreError::Unavailable)) => {
            ErrorCode::Unavailable
        }
        _ => ErrorCode::Internal,
    };
    ClientResponse::Error {
        code,
        message: e.to_string(),
    }
}
