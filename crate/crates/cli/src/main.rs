//! `hyper` — submit recipes, move data, watch workflows, run a local
//! cluster, benchmark the data plane.
//!
//! Exit codes: 0 success, 1 workflow failed, 2 usage/validation error,
//! 3 not found, 4 transport/store failure.
//!
//! Configuration comes from flags and two environment variables:
//! `HYPER_MASTER` (master endpoint) and `HYPER_STORE_ROOT` (object-store
//! directory for masterless data commands). Stdout carries data, stderr
//! diagnostics.

mod client;
mod sim;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hyper_core::bench::{bench_chunks, bench_stream_vs_local, BenchConfig, BenchReport};
use hyper_core::chunkfs;
use hyper_core::cluster::LogSource;
use hyper_core::objectstore::{DiskStore, SharedStore, StorePerfModel};
use hyper_core::recipe::Phase;
use hyper_core::wire::{ClientRequest, ClientResponse, ErrorCode, LogFilter};

const EXIT_OK: u8 = 0;
const EXIT_WORKFLOW_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NOT_FOUND: u8 = 3;
const EXIT_TRANSPORT: u8 = 4;

#[derive(Parser)]
#[command(name = "hyper", version, about = "Recipe-driven workflow orchestration")]
struct Cli {
    /// Master endpoint (host:port); defaults to $HYPER_MASTER.
    #[arg(long, global = true)]
    master: Option<String>,
    /// Object store root for masterless data commands; defaults to
    /// $HYPER_STORE_ROOT.
    #[arg(long, global = true)]
    store_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Submit a recipe; prints the workflow id.
    Up {
        recipe: PathBuf,
        /// Seed for parameter sampling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stream status until the workflow reaches a terminal phase.
        #[arg(long)]
        wait: bool,
    },
    /// Upload and inspect datasets.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Show workflow status.
    Status {
        workflow_id: String,
        #[arg(long)]
        json: bool,
    },
    /// Show collected logs for a workflow.
    Logs {
        workflow_id: String,
        #[arg(long)]
        task: Option<String>,
        /// application | utilization | system
        #[arg(long)]
        source: Option<String>,
        #[arg(long)]
        node: Option<String>,
    },
    /// Run a local cluster: a master plus N in-process node workers.
    /// With --seed (and --recipe) it runs a deterministic simulation on a
    /// simulated clock instead and exits when the workflow finishes.
    Sim(sim::SimArgs),
    /// Data-plane benchmarks against a modeled store.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Chunk and upload a directory as a dataset.
    Put {
        local_dir: PathBuf,
        dataset: String,
        /// Chunk target size in bytes.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        chunk_size: Option<u64>,
    },
    /// List the files of an uploaded dataset.
    Ls { dataset: String },
}

#[derive(Args)]
struct BenchCommonArgs {
    #[arg(long, default_value_t = 100)]
    files: usize,
    #[arg(long, default_value_t = 4096)]
    file_size: u64,
    #[arg(long, default_value_t = 10)]
    get_latency_ms: u64,
    /// Bytes/second transfer cap; 0 = unlimited.
    #[arg(long, default_value_t = 0)]
    bandwidth: u64,
    /// Concurrent requests the store services; 0 = unlimited.
    #[arg(long, default_value_t = 0)]
    max_parallel: usize,
    /// Write the report as CSV to this path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Read throughput across chunk sizes and parallelism degrees.
    Chunks {
        /// Comma-separated chunk targets in bytes.
        #[arg(long, default_value = "4096,16384,65536", value_delimiter = ',')]
        chunk_sizes: Vec<u64>,
        /// Comma-separated reader counts.
        #[arg(long, default_value = "1,2,4,10", value_delimiter = ',')]
        parallelism: Vec<usize>,
        #[command(flatten)]
        common: BenchCommonArgs,
    },
    /// Synthetic training loop: local files vs prefetched streaming.
    Stream {
        #[arg(long, default_value_t = 16384)]
        chunk_size: u64,
        #[arg(long, default_value_t = 10)]
        compute_ms: u64,
        #[arg(long, default_value_t = 2)]
        prefetch_depth: usize,
        #[command(flatten)]
        common: BenchCommonArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    };
    ExitCode::from(code)
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn transport(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_TRANSPORT,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_NOT_FOUND,
            message: message.into(),
        }
    }
}

fn run(cli: Cli) -> Result<u8, CliError> {
    let master = cli
        .master
        .or_else(|| std::env::var("HYPER_MASTER").ok().filter(|s| !s.is_empty()));
    let store_root = cli.store_root.or_else(|| {
        std::env::var("HYPER_STORE_ROOT")
            .ok()
            .filter(|s| !s.is_empty())
            .map(PathBuf::from)
    });

    match cli.command {
        Command::Up { recipe, seed, wait } => cmd_up(&master, &recipe, seed, wait),
        Command::Data { command } => match command {
            DataCommand::Put {
                local_dir,
                dataset,
                chunk_size,
            } => cmd_data_put(&master, &store_root, &local_dir, &dataset, chunk_size),
            DataCommand::Ls { dataset } => cmd_data_ls(&store_root, &dataset),
        },
        Command::Status { workflow_id, json } => cmd_status(&master, &workflow_id, json),
        Command::Logs {
            workflow_id,
            task,
            source,
            node,
        } => cmd_logs(&master, &workflow_id, task, source, node),
        Command::Sim(args) => sim::run(args, store_root),
        Command::Bench { command } => cmd_bench(command),
    }
}

fn require_master(master: &Option<String>) -> Result<&str, CliError> {
    master.as_deref().ok_or_else(|| {
        CliError::usage("no master endpoint: pass --master or set HYPER_MASTER")
    })
}

fn error_exit(code: ErrorCode, message: String) -> CliError {
    let code = match code {
        ErrorCode::Validation => EXIT_USAGE,
        ErrorCode::NotFound => EXIT_NOT_FOUND,
        ErrorCode::Unavailable | ErrorCode::Internal => EXIT_TRANSPORT,
    };
    CliError { code, message }
}

fn cmd_up(master: &Option<String>, recipe: &Path, seed: u64, wait: bool) -> Result<u8, CliError> {
    let master = require_master(master)?;
    let yaml = std::fs::read_to_string(recipe)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", recipe.display())))?;
    let resp = client::request(master, &ClientRequest::SubmitRecipe { yaml, seed })?;
    let workflow_id = match resp {
        ClientResponse::Submitted {
            workflow_id,
            warnings,
        } => {
            for warning in warnings {
                eprintln!("warning: {warning}");
            }
            println!("{workflow_id}");
            std::io::stdout().flush().ok();
            workflow_id
        }
        ClientResponse::Error { code, message } => return Err(error_exit(code, message)),
        other => return Err(CliError::transport(format!("unexpected response {other:?}"))),
    };
    if !wait {
        return Ok(EXIT_OK);
    }
    let mut last_phase = None;
    loop {
        let resp = client::request(
            master,
            &ClientRequest::GetStatus {
                workflow_id: workflow_id.clone(),
            },
        )?;
        let status = match resp {
            ClientResponse::Status { status } => status,
            ClientResponse::Error { code, message } => return Err(error_exit(code, message)),
            other => return Err(CliError::transport(format!("unexpected response {other:?}"))),
        };
        if last_phase != Some(status.phase) {
            eprintln!("phase: {}", status.phase);
            last_phase = Some(status.phase);
        }
        match status.phase {
            Phase::MonitoringComplete => return Ok(EXIT_OK),
            Phase::Failed => return Ok(EXIT_WORKFLOW_FAILED),
            _ => std::thread::sleep(std::time::Duration::from_millis(250)),
        }
    }
}

fn open_store(store_root: &Option<PathBuf>) -> Result<SharedStore, CliError> {
    let root = store_root
        .clone()
        .ok_or_else(|| CliError::usage("no store: pass --store-root or set HYPER_STORE_ROOT"))?;
    let store = DiskStore::open(&root)
        .map_err(|e| CliError::transport(format!("cannot open store at {}: {e}", root.display())))?;
    Ok(std::sync::Arc::new(store))
}

fn cmd_data_put(
    master: &Option<String>,
    store_root: &Option<PathBuf>,
    local_dir: &Path,
    dataset: &str,
    chunk_size: Option<u64>,
) -> Result<u8, CliError> {
    if !local_dir.is_dir() {
        return Err(CliError::usage(format!(
            "{} is not a directory",
            local_dir.display()
        )));
    }
    let (files, chunks, uploaded, skipped) = if let Some(master) = master.as_deref() {
        let abs = local_dir
            .canonicalize()
            .map_err(|e| CliError::usage(format!("cannot resolve {}: {e}", local_dir.display())))?;
        let resp = client::request(
            master,
            &ClientRequest::UploadDataset {
                local_root: abs.to_string_lossy().into_owned(),
                dataset: dataset.to_string(),
                chunk_target: chunk_size.unwrap_or(0),
            },
        )?;
        match resp {
            ClientResponse::Uploaded {
                files,
                chunks,
                chunks_uploaded,
                chunks_skipped,
                ..
            } => (files, chunks, chunks_uploaded, chunks_skipped),
            ClientResponse::Error { code, message } => return Err(error_exit(code, message)),
            other => return Err(CliError::transport(format!("unexpected response {other:?}"))),
        }
    } else {
        let store = open_store(store_root)?;
        let target = chunk_size.unwrap_or(chunkfs::DEFAULT_CHUNK_TARGET);
        let report = chunkfs::upload_tree(local_dir, dataset, target, store.as_ref())
            .map_err(map_chunkfs_error)?;
        (
            report.manifest.files.len(),
            report.manifest.chunks.len(),
            report.chunks_uploaded,
            report.chunks_skipped,
        )
    };
    println!("dataset {dataset}: {files} files, {chunks} chunks ({uploaded} uploaded, {skipped} skipped)");
    Ok(EXIT_OK)
}

fn cmd_data_ls(store_root: &Option<PathBuf>, dataset: &str) -> Result<u8, CliError> {
    let store = open_store(store_root)?;
    let handle = chunkfs::open_dataset(dataset, store, 4).map_err(map_chunkfs_error)?;
    for file in &handle.manifest().files {
        println!("{:>12} {}", file.size, file.path);
    }
    Ok(EXIT_OK)
}

fn map_chunkfs_error(e: chunkfs::ChunkFsError) -> CliError {
    use hyper_core::objectstore::StoreError;
    match &e {
        chunkfs::ChunkFsError::Store(StoreError::NotFound(_))
        | chunkfs::ChunkFsError::FileNotInManifest(_) => CliError::not_found(e.to_string()),
        _ => CliError::transport(e.to_string()),
    }
}

fn cmd_status(master: &Option<String>, workflow_id: &str, json: bool) -> Result<u8, CliError> {
    let master = require_master(master)?;
    let resp = client::request(
        master,
        &ClientRequest::GetStatus {
            workflow_id: workflow_id.to_string(),
        },
    )?;
    let status = match resp {
        ClientResponse::Status { status } => status,
        ClientResponse::Error { code, message } => return Err(error_exit(code, message)),
        other => return Err(CliError::transport(format!("unexpected response {other:?}"))),
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&status).expect("status serializes"));
    } else {
        println!("workflow {}  phase {}", status.workflow_id, status.phase);
        println!("live nodes: {}", status.live_nodes);
        for (experiment, counts) in &status.experiments {
            let summary: Vec<String> =
                counts.iter().map(|(state, n)| format!("{state}={n}")).collect();
            println!("  {experiment}: {}", summary.join(" "));
        }
    }
    Ok(EXIT_OK)
}

fn cmd_logs(
    master: &Option<String>,
    workflow_id: &str,
    task: Option<String>,
    source: Option<String>,
    node: Option<String>,
) -> Result<u8, CliError> {
    let master = require_master(master)?;
    let source = match source.as_deref() {
        None => None,
        Some("application") => Some(LogSource::Application),
        Some("utilization") => Some(LogSource::Utilization),
        Some("system") => Some(LogSource::System),
        Some(other) => {
            return Err(CliError::usage(format!(
                "unknown source {other:?}: expected application, utilization or system"
            )))
        }
    };
    let resp = client::request(
        master,
        &ClientRequest::GetLogs {
            workflow_id: workflow_id.to_string(),
            filter: LogFilter { node, task, source },
        },
    )?;
    let records = match resp {
        ClientResponse::Logs { records } => records,
        ClientResponse::Error { code, message } => return Err(error_exit(code, message)),
        other => return Err(CliError::transport(format!("unexpected response {other:?}"))),
    };
    for r in records {
        let source = match r.source {
            LogSource::Application => "app",
            LogSource::Utilization => "util",
            LogSource::System => "sys",
        };
        match r.task_id {
            Some(task) => println!("{:>10} {} {:<4} [{}] {}", r.at_ms, r.node_id, source, task, r.line),
            None => println!("{:>10} {} {:<4} {}", r.at_ms, r.node_id, source, r.line),
        }
    }
    Ok(EXIT_OK)
}

fn cmd_bench(command: BenchCommand) -> Result<u8, CliError> {
    let (report, csv_path) = match command {
        BenchCommand::Chunks {
            chunk_sizes,
            parallelism,
            common,
        } => {
            let config = BenchConfig {
                chunk_targets: chunk_sizes,
                parallelism,
                file_count: common.files,
                file_size: common.file_size,
                perf: StorePerfModel {
                    get_latency_ms: common.get_latency_ms,
                    put_latency_ms: 0,
                    bandwidth_bps: common.bandwidth,
                    max_parallel: common.max_parallel,
                },
                compute_ms: 0,
                prefetch_depth: 0,
            };
            (
                bench_chunks(&config).map_err(|e| CliError::transport(e.to_string()))?,
                common.csv,
            )
        }
        BenchCommand::Stream {
            chunk_size,
            compute_ms,
            prefetch_depth,
            common,
        } => {
            let config = BenchConfig {
                chunk_targets: vec![chunk_size],
                parallelism: vec![1],
                file_count: common.files,
                file_size: common.file_size,
                perf: StorePerfModel {
                    get_latency_ms: common.get_latency_ms,
                    put_latency_ms: 0,
                    bandwidth_bps: common.bandwidth,
                    max_parallel: common.max_parallel,
                },
                compute_ms,
                prefetch_depth,
            };
            let report =
                bench_stream_vs_local(&config).map_err(|e| CliError::transport(e.to_string()))?;
            print_stream_ratio(&report);
            (report, common.csv)
        }
    };
    print!("{}", report.render_table());
    if let Some(path) = csv_path {
        std::fs::write(&path, report.to_csv())
            .map_err(|e| CliError::transport(format!("cannot write {}: {e}", path.display())))?;
        eprintln!("csv written to {}", path.display());
    }
    Ok(EXIT_OK)
}

fn print_stream_ratio(report: &BenchReport) {
    let wall = |mode: &str| {
        report
            .rows
            .iter()
            .find(|r| r.mode == mode)
            .map(|r| r.wall_ms as f64)
    };
    if let (Some(local), Some(stream)) = (wall("local"), wall("stream")) {
        println!("stream/local wall-time ratio: {:.3}", stream / local.max(1.0));
    }
}
