//! S3-like object storage with pluggable backends.
//!
//! Two backends ([`MemStore`], [`DiskStore`]) implement the same
//! [`ObjectStore`] trait. [`ModeledStore`] wraps either one and injects
//! per-request latency, a bandwidth cap and a parallelism cap, so benchmark
//! curves are produced by running real code paths against a synthetic
//! service. [`OutageStore`] simulates outages for fault tests.
//!
//! All backends keep request counters ([`ObjectStoreStats`]) that the cache
//! and prefetch tests assert against.

mod disk;
mod mem;
mod modeled;
mod outage;

pub use disk::DiskStore;
pub use mem::MemStore;
pub use modeled::{ModeledStore, StorePerfModel};
pub use outage::OutageStore;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("object not found: {0}")]
    NotFound(ObjectKey),
    #[error("store unavailable")]
    Unavailable,
    #[error("invalid object key: {0}")]
    InvalidKey(String),
    #[error("store I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Bucket plus slash-separated key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObjectKey {
    pub bucket: String,
    pub key: String,
}

impl ObjectKey {
    /// A fully-qualified key naming one object.
    pub fn new(bucket: impl Into<String>, key: impl Into<String>) -> Result<Self, StoreError> {
        let bucket = bucket.into();
        let key = key.into();
        validate_bucket(&bucket)?;
        if key.is_empty() {
            return Err(StoreError::InvalidKey("empty key".into()));
        }
        validate_key_segments(&key)?;
        Ok(Self { bucket, key })
    }

    /// A listing prefix; the key part may be empty or end with `/`.
    pub fn prefix(bucket: impl Into<String>, key_prefix: impl Into<String>) -> Result<Self, StoreError> {
        let bucket = bucket.into();
        let key = key_prefix.into();
        validate_bucket(&bucket)?;
        if !key.is_empty() {
            validate_key_segments(key.trim_end_matches('/'))?;
        }
        Ok(Self { bucket, key })
    }
}

impl fmt::Display for ObjectKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.bucket, self.key)
    }
}

fn validate_bucket(bucket: &str) -> Result<(), StoreError> {
    if bucket.is_empty() {
        return Err(StoreError::InvalidKey("empty bucket".into()));
    }
    if bucket.contains('/') || bucket == "." || bucket == ".." {
        return Err(StoreError::InvalidKey(format!("bad bucket name {bucket:?}")));
    }
    Ok(())
}

fn validate_key_segments(key: &str) -> Result<(), StoreError> {
    for seg in key.split('/') {
        if seg.is_empty() || seg == ".." || seg == "." {
            return Err(StoreError::InvalidKey(format!(
                "key {key:?} has empty or dot segment"
            )));
        }
    }
    Ok(())
}

/// Monotonically non-decreasing request counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectStoreStats {
    pub gets: u64,
    pub puts: u64,
    pub lists: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
}

/// Shared atomic counters; snapshot via [`StatsCell::snapshot`].
#[derive(Debug, Default)]
pub struct StatsCell {
    gets: AtomicU64,
    puts: AtomicU64,
    lists: AtomicU64,
    bytes_in: AtomicU64,
    bytes_out: AtomicU64,
}

impl StatsCell {
    pub fn record_get(&self, bytes: u64) {
        self.gets.fetch_add(1, Ordering::Relaxed);
        self.bytes_out.fetch_add(bytes, Ordering::Relaxed);
    }

    pub fn record_put(&self, bytes: u64) {
        self.puts.fetch_add(1, Ordering::Relaxed);
        self.bytes_in.fetch_add(bytes, Ordering::Relaxed);
    }

    pub fn record_list(&self) {
        self.lists.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> ObjectStoreStats {
        ObjectStoreStats {
            gets: self.gets.load(Ordering::Relaxed),
            puts: self.puts.load(Ordering::Relaxed),
            lists: self.lists.load(Ordering::Relaxed),
            bytes_in: self.bytes_in.load(Ordering::Relaxed),
            bytes_out: self.bytes_out.load(Ordering::Relaxed),
        }
    }
}

/// Thread-safe put/get/list with request accounting.
///
/// Overwrite semantics are last-writer-wins. Counters only move for
/// completed requests.
pub trait ObjectStore: Send + Sync {
    fn put(&self, key: &ObjectKey, data: &[u8]) -> Result<(), StoreError>;
    fn get(&self, key: &ObjectKey) -> Result<Vec<u8>, StoreError>;
    /// Keys in `prefix.bucket` whose key starts with `prefix.key`,
    /// lexicographically ordered.
    fn list(&self, prefix: &ObjectKey) -> Result<Vec<ObjectKey>, StoreError>;
    /// All bucket names, lexicographically ordered.
    fn buckets(&self) -> Result<Vec<String>, StoreError>;
    fn stats(&self) -> ObjectStoreStats;
}

/// Shared handle used throughout the crate.
pub type SharedStore = Arc<dyn ObjectStore>;
