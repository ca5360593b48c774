//! Outage injection wrapper for fault tests.

use std::sync::atomic::{AtomicBool, AtomicI64, Ordering};

use super::{ObjectKey, ObjectStore, ObjectStoreStats, StoreError};

/// Wraps a store and fails requests while an outage is active. A put budget
/// can be armed to knock the store out after a fixed number of writes, which
/// is how restartable-upload tests interrupt an upload mid-flight.
pub struct OutageStore<S> {
    inner: S,
    down: AtomicBool,
    puts_until_outage: AtomicI64,
}

impl<S: ObjectStore> OutageStore<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            down: AtomicBool::new(false),
            puts_until_outage: AtomicI64::new(-1),
        }
    }

    pub fn set_down(&self, down: bool) {
        self.down.store(down, Ordering::SeqCst);
    }

    /// Allow `n` more puts, then behave as if the store went down.
    pub fn fail_after_puts(&self, n: i64) {
        self.puts_until_outage.store(n, Ordering::SeqCst);
    }

    fn check_up(&self) -> Result<(), StoreError> {
        if self.down.load(Ordering::SeqCst) {
            return Err(StoreError::Unavailable);
        }
        Ok(())
    }
}

impl<S: ObjectStore> ObjectStore for OutageStore<S> {
    fn put(&self, key: &ObjectKey, data: &[u8]) -> Result<(), StoreError> {
        self.check_up()?;
        let budget = self.puts_until_outage.load(Ordering::SeqCst);
        if budget >= 0 {
            if budget == 0 {
                self.down.store(true, Ordering::SeqCst);
                return Err(StoreError::Unavailable);
            }
            self.puts_until_outage.fetch_sub(1, Ordering::SeqCst);
        }
        self.inner.put(key, data)
    }

    fn get(&self, key: &ObjectKey) -> Result<Vec<u8>, StoreError> {
        self.check_up()?;
        self.inner.get(key)
    }

    fn list(&self, prefix: &ObjectKey) -> Result<Vec<ObjectKey>, StoreError> {
        self.check_up()?;
        self.inner.list(prefix)
    }

    fn buckets(&self) -> Result<Vec<String>, StoreError> {
        self.check_up()?;
        self.inner.buckets()
    }

    fn stats(&self) -> ObjectStoreStats {
        self.inner.stats()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectstore::MemStore;

    #[test]
    fn outage_blocks_all_requests() {
        let store = OutageStore::new(MemStore::new());
        let k = ObjectKey::new("b", "x").unwrap();
        store.put(&k, b"1").unwrap();
        store.set_down(true);
        assert!(matches!(store.get(&k), Err(StoreError::Unavailable)));
        assert!(matches!(store.put(&k, b"2"), Err(StoreError::Unavailable)));
        store.set_down(false);
        assert_eq!(store.get(&k).unwrap(), b"1");
    }

    #[test]
    fn put_budget_trips_outage() {
        let store = OutageStore::new(MemStore::new());
        store.fail_after_puts(2);
        let k1 = ObjectKey::new("b", "1").unwrap();
        let k2 = ObjectKey::new("b", "2").unwrap();
        let k3 = ObjectKey::new("b", "3").unwrap();
        store.put(&k1, b"a").unwrap();
        store.put(&k2, b"b").unwrap();
        assert!(matches!(store.put(&k3, b"c"), Err(StoreError::Unavailable)));
        assert!(matches!(store.get(&k1), Err(StoreError::Unavailable)));
    }
}
