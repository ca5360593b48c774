//! Benchmark harness for the data plane.
//!
//! Absolute throughput numbers are machine- and deployment-specific; what
//! the harness checks is the shape of the curves against an injectable
//! store model where predictions are exact: chunk-size and parallelism
//! scaling of bulk reads (`bench_chunks`), and wall-time equivalence of a
//! prefetched stream versus local files under a synthetic training loop
//! (`bench_stream_vs_local`).

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::chunkfs::{self, open_dataset, ChunkFsError};
use crate::objectstore::{MemStore, ModeledStore, SharedStore, StorePerfModel};

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub chunk_targets: Vec<u64>,
    pub parallelism: Vec<usize>,
    pub file_count: usize,
    pub file_size: u64,
    pub perf: StorePerfModel,
    /// Synthetic per-item model step for the training-loop benchmark.
    pub compute_ms: u64,
    pub prefetch_depth: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            chunk_targets: vec![4 * 1024, 16 * 1024, 64 * 1024],
            parallelism: vec![1, 2, 4, 10],
            file_count: 100,
            file_size: 4 * 1024,
            perf: StorePerfModel {
                get_latency_ms: 10,
                put_latency_ms: 0,
                bandwidth_bps: 0,
                max_parallel: 0,
            },
            compute_ms: 10,
            prefetch_depth: 2,
        }
    }
}

/// One measured configuration.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub benchmark: &'static str,
    pub mode: String,
    pub chunk_target: u64,
    pub parallelism: usize,
    pub prefetch_depth: usize,
    pub compute_ms: u64,
    pub files: usize,
    pub bytes: u64,
    pub wall_ms: u64,
    pub gets: u64,
    pub cache_hits: u64,
    pub throughput_bps: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "benchmark,mode,chunk_target,parallelism,prefetch_depth,compute_ms,files,bytes,wall_ms,gets,cache_hits,throughput_bps";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{:.1}\n",
                r.benchmark,
                r.mode,
                r.chunk_target,
                r.parallelism,
                r.prefetch_depth,
                r.compute_ms,
                r.files,
                r.bytes,
                r.wall_ms,
                r.gets,
                r.cache_hits,
                r.throughput_bps
            ));
        }
        out
    }

    pub fn render_table(&self) -> String {
        let mut out = format!(
            "{:<8} {:<8} {:>12} {:>11} {:>8} {:>10} {:>9} {:>6} {:>14}\n",
            "bench", "mode", "chunk_target", "parallelism", "wall_ms", "gets", "hits", "files", "throughput"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<8} {:<8} {:>12} {:>11} {:>8} {:>10} {:>9} {:>6} {:>11.1}/s\n",
                r.benchmark,
                r.mode,
                r.chunk_target,
                r.parallelism,
                r.wall_ms,
                r.gets,
                r.cache_hits,
                r.files,
                r.throughput_bps
            ));
        }
        out
    }
}

/// Deterministic synthetic tree: `file_count` files of `file_size` bytes,
/// each file's content distinct so chunks do not collapse by content
/// address.
pub fn generate_dataset(dir: &Path, file_count: usize, file_size: u64) -> std::io::Result<()> {
    for i in 0..file_count {
        let mut data = vec![(i % 251) as u8; file_size as usize];
        let tag = (i as u64).to_le_bytes();
        let n = tag.len().min(data.len());
        data[..n].copy_from_slice(&tag[..n]);
        fs::write(dir.join(format!("item-{i:06}.bin")), data)?;
    }
    Ok(())
}

fn modeled_store(perf: StorePerfModel) -> SharedStore {
    Arc::new(ModeledStore::new(MemStore::new(), perf))
}

/// End-to-end read throughput for each (chunk_target, parallelism) pair
/// against the latency-modeled store. Readers split the file list at chunk
/// boundaries, so GET counts equal chunk counts exactly.
pub fn bench_chunks(config: &BenchConfig) -> Result<BenchReport, ChunkFsError> {
    let source = tempfile::tempdir()?;
    generate_dataset(source.path(), config.file_count, config.file_size)?;
    let total_bytes = config.file_count as u64 * config.file_size;
    let mut report = BenchReport::default();

    for &chunk_target in &config.chunk_targets {
        // Upload once per chunk size against an unmodeled store, then
        // measure reads against the modeled one seeded with the same
        // objects.
        let store = modeled_store(StorePerfModel {
            put_latency_ms: 0,
            ..config.perf
        });
        let upload = chunkfs::upload_tree(source.path(), "bench", chunk_target, store.as_ref())?;
        let manifest = &upload.manifest;
        let chunk_count = manifest.chunks.len();
        let files_per_chunk = (chunk_target / config.file_size).max(1) as usize;

        for &parallelism in &config.parallelism {
            let handle = open_dataset("bench", Arc::clone(&store), chunk_count.max(1) + 1)?;
            let paths: Vec<String> = manifest.files.iter().map(|f| f.path.clone()).collect();
            // Contiguous slices aligned to chunk boundaries.
            let slice_len = files_per_chunk * chunk_count.div_ceil(parallelism.max(1)).max(1);
            let slices: Vec<Vec<String>> = paths
                .chunks(slice_len.max(1))
                .map(|s| s.to_vec())
                .collect();

            let gets_before = store.stats().gets;
            let started = Instant::now();
            std::thread::scope(|scope| {
                for slice in &slices {
                    let handle = handle.clone();
                    scope.spawn(move || {
                        for path in slice {
                            handle.read_file(path).expect("bench read");
                        }
                    });
                }
            });
            let wall = started.elapsed();
            let gets = store.stats().gets - gets_before;
            let metrics = handle.cache_metrics();
            report.rows.push(BenchRow {
                benchmark: "chunks",
                mode: "read".into(),
                chunk_target,
                parallelism,
                prefetch_depth: 0,
                compute_ms: 0,
                files: config.file_count,
                bytes: total_bytes,
                wall_ms: wall.as_millis() as u64,
                gets,
                cache_hits: metrics.hits,
                throughput_bps: total_bytes as f64 / wall.as_secs_f64().max(1e-9),
            });
        }
    }
    Ok(report)
}

/// Identical synthetic training loop over (a) local files and (b) a
/// prefetched chunkfs stream; rows carry both wall times.
pub fn bench_stream_vs_local(config: &BenchConfig) -> Result<BenchReport, ChunkFsError> {
    let source = tempfile::tempdir()?;
    generate_dataset(source.path(), config.file_count, config.file_size)?;
    let chunk_target = *config.chunk_targets.first().unwrap_or(&(16 * 1024));
    let total_bytes = config.file_count as u64 * config.file_size;

    let store = modeled_store(config.perf);
    let upload = chunkfs::upload_tree(source.path(), "bench", chunk_target, store.as_ref())?;
    let paths: Vec<String> = upload.manifest.files.iter().map(|f| f.path.clone()).collect();
    let chunk_count = upload.manifest.chunks.len();

    let mut report = BenchReport::default();
    let compute = Duration::from_millis(config.compute_ms);

    // (a) local: the source tree is the local copy.
    let started = Instant::now();
    for path in &paths {
        let data = fs::read(source.path().join(path))?;
        std::hint::black_box(&data);
        std::thread::sleep(compute);
    }
    let local_wall = started.elapsed();
    report.rows.push(BenchRow {
        benchmark: "stream",
        mode: "local".into(),
        chunk_target,
        parallelism: 1,
        prefetch_depth: 0,
        compute_ms: config.compute_ms,
        files: config.file_count,
        bytes: total_bytes,
        wall_ms: local_wall.as_millis() as u64,
        gets: 0,
        cache_hits: 0,
        throughput_bps: total_bytes as f64 / local_wall.as_secs_f64().max(1e-9),
    });

    // (b) streaming through chunkfs with prefetch.
    let handle = open_dataset("bench", Arc::clone(&store), chunk_count.max(1) + 1)?;
    let gets_before = store.stats().gets;
    let started = Instant::now();
    for (_, bytes) in handle.stream(paths.clone(), config.prefetch_depth)? {
        let data = bytes?;
        std::hint::black_box(&data);
        std::thread::sleep(compute);
    }
    let stream_wall = started.elapsed();
    report.rows.push(BenchRow {
        benchmark: "stream",
        mode: "stream".into(),
        chunk_target,
        parallelism: 1,
        prefetch_depth: config.prefetch_depth,
        compute_ms: config.compute_ms,
        files: config.file_count,
        bytes: total_bytes,
        wall_ms: stream_wall.as_millis() as u64,
        gets: store.stats().gets - gets_before,
        cache_hits: handle.cache_metrics().hits,
        throughput_bps: total_bytes as f64 / stream_wall.as_secs_f64().max(1e-9),
    });
    Ok(report)
}
