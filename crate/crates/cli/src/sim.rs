//! `hyper sim`: a local cluster in one process.
//!
//! Two modes:
//! - server mode (default): real master on a TCP endpoint plus N node
//!   worker threads executing tasks as subprocesses. Killed workers are
//!   replaced after a delay with fresh node ids, like a spot fleet holding
//!   its target size. Runs until the process is terminated.
//! - `--seed` mode: fully deterministic in-process simulation on a
//!   simulated clock; requires `--recipe`, runs the workflow to a terminal
//!   phase, optionally dumps the event log, and exits 0 iff the workflow
//!   completed.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use clap::Args;

use hyper_core::clock::SystemClock;
use hyper_core::cluster::sim::{SimConfig, SimDriver};
use hyper_core::cluster::{start_node, FaultPlan, NodeConfig, NodeHandle};
use hyper_core::master::{self, FileEventLog, LogStore, Master, MasterConfig};
use hyper_core::objectstore::{DiskStore, ObjectKey, SharedStore};
use hyper_core::recipe::Phase;
use hyper_core::scheduler::SchedulerConfig;

use crate::{CliError, EXIT_OK, EXIT_WORKFLOW_FAILED};

#[derive(Args)]
pub struct SimArgs {
    #[arg(long, default_value_t = 3)]
    pub nodes: u32,
    /// Task slots per node.
    #[arg(long, default_value_t = 2)]
    pub capacity: u32,
    /// Per-heartbeat kill probability (spot preemption model).
    #[arg(long, default_value_t = 0.0)]
    pub spot_kill_prob: f64,
    /// Run a deterministic simulation with this seed (requires --recipe).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Recipe to drive in --seed mode.
    #[arg(long)]
    pub recipe: Option<PathBuf>,
    #[arg(long, default_value_t = 400)]
    pub heartbeat_ms: u64,
    /// Bind address in server mode.
    #[arg(long, default_value = "127.0.0.1:0")]
    pub bind: String,
    /// Write the simulation event log (newline-delimited JSON) here.
    #[arg(long)]
    pub events_out: Option<PathBuf>,
    /// Working directory for master state and node sandboxes.
    #[arg(long)]
    pub workdir: Option<PathBuf>,
}

pub fn run(args: SimArgs, store_root: Option<PathBuf>) -> Result<u8, CliError> {
    if !(0.0..=1.0).contains(&args.spot_kill_prob) {
        return Err(CliError::usage("--spot-kill-prob must be in [0, 1]"));
    }
    match args.seed {
        Some(seed) => run_deterministic(args, seed),
        None => run_server(args, store_root),
    }
}

fn run_deterministic(args: SimArgs, seed: u64) -> Result<u8, CliError> {
    let recipe_path = args
        .recipe
        .as_ref()
        .ok_or_else(|| CliError::usage("--seed mode needs --recipe <file>"))?;
    let yaml = std::fs::read_to_string(recipe_path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", recipe_path.display())))?;

    let config = SimConfig {
        nodes: args.nodes,
        capacity: args.capacity,
        spot_kill_prob: args.spot_kill_prob,
        seed,
        heartbeat_interval_ms: 100,
        liveness_timeout_ms: 350,
        snapshot_interval_ms: 2_000,
        ..Default::default()
    };
    let mut sim = SimDriver::new(config).map_err(|e| CliError::transport(e.to_string()))?;
    let workflow_id = sim
        .submit(&yaml, seed)
        .map_err(|e| CliError::usage(e.to_string()))?;
    println!("{workflow_id}");
    let phase = sim
        .run_to_terminal(&workflow_id)
        .map_err(|e| CliError::transport(e.to_string()))?;
    let events = sim.event_lines();
    println!("phase: {phase}");
    println!("events: {}", events.len());
    std::io::stdout().flush().ok();
    if let Some(path) = &args.events_out {
        std::fs::write(path, events.join("\n") + "\n")
            .map_err(|e| CliError::transport(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(if phase == Phase::MonitoringComplete {
        EXIT_OK
    } else {
        EXIT_WORKFLOW_FAILED
    })
}

fn run_server(args: SimArgs, store_root: Option<PathBuf>) -> Result<u8, CliError> {
    let base = args.workdir.clone().unwrap_or_else(|| {
        std::env::temp_dir().join(format!("hyper-sim-{}", std::process::id()))
    });
    let store_root = store_root.unwrap_or_else(|| base.join("store"));
    std::fs::create_dir_all(&base).map_err(|e| CliError::transport(e.to_string()))?;

    let store: SharedStore = Arc::new(
        DiskStore::open(&store_root).map_err(|e| CliError::transport(e.to_string()))?,
    );
    let event_log = FileEventLog::shared(base.join("events.ndjson"))
        .map_err(|e| CliError::transport(e.to_string()))?;
    let logs = LogStore::open_file(base.join("logs.ndjson"))
        .map_err(|e| CliError::transport(e.to_string()))?;

    // A stable per-workdir identity keys this master's snapshots, so
    // relaunching with the same workdir recovers state (snapshot + event-log
    // replay) instead of starting blind next to a non-empty log.
    let id_path = base.join("master-id");
    let master_id = match std::fs::read_to_string(&id_path) {
        Ok(id) => id.trim().to_string(),
        Err(_) => {
            let id = format!("m{:08x}", std::process::id() ^ 0x5eed_c0de);
            std::fs::write(&id_path, &id).map_err(|e| CliError::transport(e.to_string()))?;
            id
        }
    };

    let scheduler = SchedulerConfig {
        heartbeat_interval_ms: args.heartbeat_ms,
        liveness_timeout_ms: args.heartbeat_ms * 3 + args.heartbeat_ms / 2,
        ..Default::default()
    };
    let master = Master::restore(
        MasterConfig {
            scheduler,
            snapshot_interval_ms: 10_000,
            snapshot_key: ObjectKey::new("_hyper", format!("snapshots/{master_id}"))
                .map_err(|e| CliError::transport(e.to_string()))?,
            ..Default::default()
        },
        Arc::clone(&store),
        event_log,
        logs,
        Arc::new(SystemClock),
    )
    .map_err(|e| CliError::transport(e.to_string()))?;

    let tick_ms = (args.heartbeat_ms / 2).max(20);
    let handle = master::serve(master, &args.bind, tick_ms)
        .map_err(|e| CliError::transport(e.to_string()))?;
    let addr = handle.addr();
    println!("master listening on {addr}");
    println!("store root {}", store_root.display());
    std::io::stdout().flush().ok();

    // Node fleet with respawn-on-death. Ids are unique across restarts of
    // the same workdir (dead node ids are terminal on the master).
    let node_prefix = format!("n{:x}", std::process::id());
    let mut next_node = 0u64;
    let spawn = |next_node: &mut u64| -> Option<NodeHandle> {
        *next_node += 1;
        let node_id = format!("{node_prefix}-{:03}", *next_node);
        let mut config = NodeConfig::new(node_id.clone(), args.capacity);
        config.heartbeat_interval_ms = args.heartbeat_ms;
        config.spot = args.spot_kill_prob > 0.0;
        if args.spot_kill_prob > 0.0 {
            config.fault_plan = FaultPlan::kill_with_probability(
                args.spot_kill_prob,
                // Wall-clock entropy: server mode is not the reproducible
                // path, the seeded simulation is.
                std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_nanos() as u64)
                    .unwrap_or(0),
            );
        }
        let workdir = base.join("nodes").join(&node_id);
        match start_node(&addr.to_string(), config, workdir, Some(Arc::clone(&store))) {
            Ok(h) => {
                eprintln!("node {node_id} up");
                Some(h)
            }
            Err(e) => {
                eprintln!("node {node_id} failed to start: {e}");
                None
            }
        }
    };

    let mut fleet: Vec<NodeHandle> = Vec::new();
    for _ in 0..args.nodes {
        fleet.extend(spawn(&mut next_node));
    }

    // Supervisor loop: replace dead workers, run until the process is
    // killed.
    loop {
        std::thread::sleep(std::time::Duration::from_millis(args.heartbeat_ms));
        let before = fleet.len();
        fleet.retain(|h| !h.is_finished());
        let died = before - fleet.len();
        for _ in 0..died {
            std::thread::sleep(std::time::Duration::from_millis(args.heartbeat_ms));
            fleet.extend(spawn(&mut next_node));
        }
    }
}
