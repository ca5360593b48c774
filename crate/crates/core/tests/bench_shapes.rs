//! Shape checks for the benchmark harness against the modeled store, where
//! the analytic predictions are exact.

use hyper_core::bench::{bench_chunks, BenchConfig};
use hyper_core::objectstore::StorePerfModel;

#[test]
fn throughput_grows_with_chunk_size_in_latency_bound_regime() {
    // Fixed 5ms GET latency, no bandwidth cap: per-chunk cost is constant,
    // so bigger chunks mean fewer requests and strictly higher throughput.
    let config = BenchConfig {
        chunk_targets: vec![1024, 4096, 16384],
        parallelism: vec![1],
        file_count: 32,
        file_size: 1024,
        perf: StorePerfModel {
            get_latency_ms: 5,
            put_latency_ms: 0,
            bandwidth_bps: 0,
            max_parallel: 0,
        },
        compute_ms: 0,
        prefetch_depth: 0,
    };
    let report = bench_chunks(&config).unwrap();
    let throughput = |target: u64| {
        report
            .rows
            .iter()
            .find(|r| r.chunk_target == target)
            .unwrap()
            .throughput_bps
    };
    assert!(
        throughput(1024) < throughput(4096) && throughput(4096) < throughput(16384),
        "throughput must grow with chunk size: {:.0} / {:.0} / {:.0}",
        throughput(1024),
        throughput(4096),
        throughput(16384)
    );
}

#[test]
fn throughput_non_decreasing_in_parallelism_up_to_cap() {
    // 32 chunks, store services at most 4 requests at once: throughput
    // rises to parallelism 4 and flattens beyond it (within 10%).
    let config = BenchConfig {
        chunk_targets: vec![1024],
        parallelism: vec![1, 2, 4, 8],
        file_count: 32,
        file_size: 1024,
        perf: StorePerfModel {
            get_latency_ms: 8,
            put_latency_ms: 0,
            bandwidth_bps: 0,
            max_parallel: 4,
        },
        compute_ms: 0,
        prefetch_depth: 0,
    };
    let report = bench_chunks(&config).unwrap();
    let throughput = |p: usize| {
        report
            .rows
            .iter()
            .find(|r| r.parallelism == p)
            .unwrap()
            .throughput_bps
    };
    for pair in [(1, 2), (2, 4)] {
        assert!(
            throughput(pair.1) >= throughput(pair.0) * 0.9,
            "throughput must be non-decreasing up to the cap: p{} {:.0} vs p{} {:.0}",
            pair.0,
            throughput(pair.0),
            pair.1,
            throughput(pair.1)
        );
    }
    // Past the service cap there is no further speedup (10% noise floor).
    let capped = throughput(4);
    let beyond = throughput(8);
    assert!(
        beyond <= capped * 1.1,
        "parallelism beyond max_parallel must not help: p4 {capped:.0}, p8 {beyond:.0}"
    );
}
