//! Synthetic performance model wrapper.
//!
//! Delays each request by `latency + size / bandwidth` and services at most
//! `max_parallel` requests at a time, which is enough to reproduce the
//! latency-versus-chunk-size and parallel-fetch scaling shapes the bench
//! harness asserts.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ObjectKey, ObjectStore, ObjectStoreStats, StoreError};

/// The all-zero default is a transparent store: no delay, no caps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorePerfModel {
    /// Fixed delay per GET, in milliseconds.
    pub get_latency_ms: u64,
    /// Fixed delay per PUT, in milliseconds.
    pub put_latency_ms: u64,
    /// Transfer rate cap in bytes/second; 0 means unlimited.
    pub bandwidth_bps: u64,
    /// Requests serviced concurrently; 0 means unlimited.
    pub max_parallel: usize,
}

impl StorePerfModel {
    /// Modeled service time for one request of `bytes` payload.
    pub fn request_delay(&self, latency_ms: u64, bytes: u64) -> Duration {
        let mut nanos = latency_ms as u128 * 1_000_000;
        if self.bandwidth_bps > 0 {
            nanos += bytes as u128 * 1_000_000_000 / self.bandwidth_bps as u128;
        }
        Duration::from_nanos(nanos as u64)
    }

    pub fn get_delay(&self, bytes: u64) -> Duration {
        self.request_delay(self.get_latency_ms, bytes)
    }

    pub fn put_delay(&self, bytes: u64) -> Duration {
        self.request_delay(self.put_latency_ms, bytes)
    }
}

#[derive(Debug, Default)]
struct Gate {
    active: Mutex<usize>,
    freed: Condvar,
}

impl Gate {
    fn acquire(&self, cap: usize) {
        if cap == 0 {
            return;
        }
        let mut active = self.active.lock().unwrap();
        while *active >= cap {
            active = self.freed.wait(active).unwrap();
        }
        *active += 1;
    }

    fn release(&self, cap: usize) {
        if cap == 0 {
            return;
        }
        let mut active = self.active.lock().unwrap();
        *active -= 1;
        drop(active);
        self.freed.notify_one();
    }
}

pub struct ModeledStore<S> {
    inner: S,
    model: StorePerfModel,
    gate: Gate,
}

impl<S: ObjectStore> ModeledStore<S> {
    pub fn new(inner: S, model: StorePerfModel) -> Self {
        Self {
            inner,
            model,
            gate: Gate::default(),
        }
    }

    pub fn model(&self) -> StorePerfModel {
        self.model
    }

    fn serviced<T>(&self, delay: Duration, op: impl FnOnce() -> T) -> T {
        self.gate.acquire(self.model.max_parallel);
        std::thread::sleep(delay);
        let out = op();
        self.gate.release(self.model.max_parallel);
        out
    }
}

impl<S: ObjectStore> ObjectStore for ModeledStore<S> {
    fn put(&self, key: &ObjectKey, data: &[u8]) -> Result<(), StoreError> {
        let delay = self.model.put_delay(data.len() as u64);
        self.serviced(delay, || self.inner.put(key, data))
    }

    fn get(&self, key: &ObjectKey) -> Result<Vec<u8>, StoreError> {
        // Size is only known after the fetch; look it up first so the
        // bandwidth term can be applied to the real payload size.
        let data = self.inner.get(key)?;
        let delay = self.model.get_delay(data.len() as u64);
        self.serviced(delay, || ());
        Ok(data)
    }

    fn list(&self, prefix: &ObjectKey) -> Result<Vec<ObjectKey>, StoreError> {
        self.inner.list(prefix)
    }

    fn buckets(&self) -> Result<Vec<String>, StoreError> {
        self.inner.buckets()
    }

    fn stats(&self) -> ObjectStoreStats {
        self.inner.stats()
    }
}
