//! Per-handle LRU chunk cache with single-flight fetches.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Condvar, Mutex};

use super::ChunkFsError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheMetrics {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
}

pub(crate) struct ChunkCache {
    state: Mutex<CacheState>,
    changed: Condvar,
}

struct CacheState {
    capacity: usize,
    entries: HashMap<String, Arc<Vec<u8>>>,
    last_used: HashMap<String, u64>,
    tick: u64,
    in_flight: HashSet<String>,
    metrics: CacheMetrics,
}

impl ChunkCache {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "cache capacity must be positive");
        Self {
            state: Mutex::new(CacheState {
                capacity,
                entries: HashMap::new(),
                last_used: HashMap::new(),
                tick: 0,
                in_flight: HashSet::new(),
                metrics: CacheMetrics::default(),
            }),
            changed: Condvar::new(),
        }
    }

    pub fn metrics(&self) -> CacheMetrics {
        self.state.lock().unwrap().metrics
    }

    #[cfg(test)]
    pub fn contains(&self, chunk_id: &str) -> bool {
        self.state.lock().unwrap().entries.contains_key(chunk_id)
    }

    /// Read-path lookup: counts exactly one hit or miss, waits out a fetch
    /// already in flight, fetches otherwise.
    pub fn get_or_fetch(
        &self,
        chunk_id: &str,
        fetch: impl FnOnce() -> Result<Vec<u8>, ChunkFsError>,
    ) -> Result<Arc<Vec<u8>>, ChunkFsError> {
        {
            let mut state = self.state.lock().unwrap();
            if let Some(data) = state.touch(chunk_id) {
                state.metrics.hits += 1;
                return Ok(data);
            }
            state.metrics.misses += 1;
            loop {
                if let Some(data) = state.touch(chunk_id) {
                    return Ok(data);
                }
                if !state.in_flight.contains(chunk_id) {
                    state.in_flight.insert(chunk_id.to_string());
                    break;
                }
                state = self.changed.wait(state).unwrap();
            }
        }
        self.fetch_into_cache(chunk_id, fetch)
    }

    /// Prefetch-path lookup: no hit/miss accounting, never fetches a chunk
    /// that is cached or already being fetched.
    pub fn prefetch(
        &self,
        chunk_id: &str,
        fetch: impl FnOnce() -> Result<Vec<u8>, ChunkFsError>,
    ) -> Result<(), ChunkFsError> {
        {
            let mut state = self.state.lock().unwrap();
            if state.entries.contains_key(chunk_id) || state.in_flight.contains(chunk_id) {
                return Ok(());
            }
            state.in_flight.insert(chunk_id.to_string());
        }
        self.fetch_into_cache(chunk_id, fetch).map(|_| ())
    }

    fn fetch_into_cache(
        &self,
        chunk_id: &str,
        fetch: impl FnOnce() -> Result<Vec<u8>, ChunkFsError>,
    ) -> Result<Arc<Vec<u8>>, ChunkFsError> {
        let fetched = fetch();
        let mut state = self.state.lock().unwrap();
        state.in_flight.remove(chunk_id);
        let result = match fetched {
            Ok(data) => {
                let data = Arc::new(data);
                state.insert(chunk_id, Arc::clone(&data));
                Ok(data)
            }
            Err(e) => Err(e),
        };
        drop(state);
        self.changed.notify_all();
        result
    }
}

impl CacheState {
    fn touch(&mut self, chunk_id: &str) -> Option<Arc<Vec<u8>>> {
        let data = self.entries.get(chunk_id).cloned()?;
        self.tick += 1;
        self.last_used.insert(chunk_id.to_string(), self.tick);
        Some(data)
    }

    fn insert(&mut self, chunk_id: &str, data: Arc<Vec<u8>>) {
        while self.entries.len() >= self.capacity {
            let victim = self
                .last_used
                .iter()
                .filter(|(id, _)| self.entries.contains_key(*id))
                .min_by_key(|(id, tick)| (**tick, (*id).clone()))
                .map(|(id, _)| id.clone());
            match victim {
                Some(id) => {
                    self.entries.remove(&id);
                    self.last_used.remove(&id);
                    self.metrics.evictions += 1;
                }
                None => break,
            }
        }
        self.tick += 1;
        self.last_used.insert(chunk_id.to_string(), self.tick);
        self.entries.insert(chunk_id.to_string(), data);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(n: u8) -> Result<Vec<u8>, ChunkFsError> {
        Ok(vec![n; 4])
    }

    #[test]
    fn hit_and_miss_accounting() {
        let cache = ChunkCache::new(4);
        cache.get_or_fetch("a", || blob(1)).unwrap();
        cache.get_or_fetch("a", || panic!("cached")).unwrap();
        let m = cache.metrics();
        assert_eq!((m.hits, m.misses), (1, 1));
    }

    #[test]
    fn lru_evicts_least_recently_used() {
        let cache = ChunkCache::new(2);
        cache.get_or_fetch("a", || blob(1)).unwrap();
        cache.get_or_fetch("b", || blob(2)).unwrap();
        cache.get_or_fetch("a", || panic!("a is cached")).unwrap();
        cache.get_or_fetch("c", || blob(3)).unwrap(); // evicts b
        assert!(cache.contains("a"));
        assert!(!cache.contains("b"));
        assert_eq!(cache.metrics().evictions, 1);
    }

    #[test]
    fn prefetch_skips_cached_and_does_not_count() {
        let cache = ChunkCache::new(2);
        cache.prefetch("a", || blob(1)).unwrap();
        cache.prefetch("a", || panic!("already cached")).unwrap();
        let m = cache.metrics();
        assert_eq!((m.hits, m.misses), (0, 0));
        cache.get_or_fetch("a", || panic!("cached")).unwrap();
        assert_eq!(cache.metrics().hits, 1);
    }

    #[test]
    fn capacity_is_respected() {
        let cache = ChunkCache::new(3);
        for i in 0..10u8 {
            cache.get_or_fetch(&format!("c{i}"), || blob(i)).unwrap();
        }
        let state = cache.state.lock().unwrap();
        assert!(state.entries.len() <= 3);
    }
}
