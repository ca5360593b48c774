//! In-memory backend.

use std::collections::BTreeMap;
use std::sync::Mutex;

use super::{ObjectKey, ObjectStore, ObjectStoreStats, StatsCell, StoreError};

#[derive(Debug, Default)]
pub struct MemStore {
    objects: Mutex<BTreeMap<(String, String), Vec<u8>>>,
    stats: StatsCell,
}

impl MemStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl ObjectStore for MemStore {
    fn put(&self, key: &ObjectKey, data: &[u8]) -> Result<(), StoreError> {
        self.objects
            .lock()
            .unwrap()
            .insert((key.bucket.clone(), key.key.clone()), data.to_vec());
        self.stats.record_put(data.len() as u64);
        Ok(())
    }

    fn get(&self, key: &ObjectKey) -> Result<Vec<u8>, StoreError> {
        let objects = self.objects.lock().unwrap();
        let data = objects
            .get(&(key.bucket.clone(), key.key.clone()))
            .cloned()
            .ok_or_else(|| StoreError::NotFound(key.clone()))?;
        self.stats.record_get(data.len() as u64);
        Ok(data)
    }

    fn list(&self, prefix: &ObjectKey) -> Result<Vec<ObjectKey>, StoreError> {
        let objects = self.objects.lock().unwrap();
        let keys = objects
            .keys()
            .filter(|(b, k)| *b == prefix.bucket && k.starts_with(&prefix.key))
            .map(|(b, k)| ObjectKey {
                bucket: b.clone(),
                key: k.clone(),
            })
            .collect();
        self.stats.record_list();
        Ok(keys)
    }

    fn buckets(&self) -> Result<Vec<String>, StoreError> {
        let objects = self.objects.lock().unwrap();
        let mut buckets: Vec<String> = objects.keys().map(|(b, _)| b.clone()).collect();
        buckets.dedup();
        Ok(buckets)
    }

    fn stats(&self) -> ObjectStoreStats {
        self.stats.snapshot()
    }
}
