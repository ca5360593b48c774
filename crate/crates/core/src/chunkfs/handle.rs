//! Reading datasets: cache-backed file reads and prefetched streaming.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use super::cache::{CacheMetrics, ChunkCache};
use super::{chunk_key, manifest_key, ChunkFsError, ChunkManifest};
use crate::objectstore::SharedStore;
use crate::util::sha256_hex;

/// Fetch the manifest, verify it, and attach an empty chunk cache of
/// `cache_capacity` chunks.
pub fn open_dataset(
    dataset: &str,
    store: SharedStore,
    cache_capacity: usize,
) -> Result<DatasetHandle, ChunkFsError> {
    let bytes = store.get(&manifest_key(dataset)?)?;
    let manifest = ChunkManifest::from_bytes(&bytes)?;
    Ok(DatasetHandle {
        inner: Arc::new(HandleInner {
            dataset: dataset.to_string(),
            manifest: Arc::new(manifest),
            store,
            cache: Arc::new(ChunkCache::new(cache_capacity)),
        }),
    })
}

struct HandleInner {
    dataset: String,
    manifest: Arc<ChunkManifest>,
    store: SharedStore,
    cache: Arc<ChunkCache>,
}

/// Shared, cheaply clonable read handle; concurrent readers share one cache.
#[derive(Clone)]
pub struct DatasetHandle {
    inner: Arc<HandleInner>,
}

impl DatasetHandle {
    pub fn dataset(&self) -> &str {
        &self.inner.dataset
    }

    pub fn manifest(&self) -> &ChunkManifest {
        &self.inner.manifest
    }

    /// Exact original bytes of one file. Chunks come from the cache when
    /// present; otherwise the whole containing chunk is fetched, its digest
    /// verified, and it is inserted (evicting LRU entries as needed).
    pub fn read_file(&self, path: &str) -> Result<Vec<u8>, ChunkFsError> {
        let file = self
            .inner
            .manifest
            .file(path)
            .ok_or_else(|| ChunkFsError::FileNotInManifest(path.to_string()))?;
        let mut out = Vec::with_capacity(file.size as usize);
        for extent in &file.extents {
            let chunk = self
                .inner
                .cache
                .get_or_fetch(&extent.chunk_id, || self.fetch_chunk(&extent.chunk_id))?;
            let start = extent.offset as usize;
            let end = start + extent.length as usize;
            out.extend_from_slice(&chunk[start..end]);
        }
        Ok(out)
    }

    pub fn cache_metrics(&self) -> CacheMetrics {
        self.inner.cache.metrics()
    }

    /// Stream `paths` in order, prefetching up to `prefetch_depth` upcoming
    /// chunks on `prefetch_depth` background threads while the consumer
    /// processes the current item. `prefetch_depth == 0` degenerates to a
    /// plain sequential read loop.
    pub fn stream(
        &self,
        paths: Vec<String>,
        prefetch_depth: usize,
    ) -> Result<StreamIter, ChunkFsError> {
        // Membership is checked up front; fetch errors surface at the yield
        // of the affected item.
        for path in &paths {
            if self.inner.manifest.file(path).is_none() {
                return Err(ChunkFsError::FileNotInManifest(path.clone()));
            }
        }

        // Chunk ids in first-need order, plus each item's position in it.
        let mut chunk_seq: Vec<String> = Vec::new();
        let mut item_chunk_pos: Vec<usize> = Vec::with_capacity(paths.len());
        for path in &paths {
            let file = self.inner.manifest.file(path).unwrap();
            let mut first_pos = chunk_seq.len().saturating_sub(1);
            for (i, extent) in file.extents.iter().enumerate() {
                let pos = match chunk_seq.iter().position(|c| *c == extent.chunk_id) {
                    Some(pos) => pos,
                    None => {
                        chunk_seq.push(extent.chunk_id.clone());
                        chunk_seq.len() - 1
                    }
                };
                if i == 0 {
                    first_pos = pos;
                }
            }
            item_chunk_pos.push(first_pos);
        }

        let shared = Arc::new(StreamShared {
            cursors: Mutex::new(Cursors {
                consumer_pos: 0,
                next_prefetch: 1,
            }),
            advanced: Condvar::new(),
            shutdown: AtomicBool::new(false),
            chunk_seq,
            depth: prefetch_depth,
        });

        let workers = (0..prefetch_depth)
            .map(|_| {
                let shared = Arc::clone(&shared);
                let handle = self.clone();
                std::thread::spawn(move || prefetch_worker(&handle, &shared))
            })
            .collect();

        Ok(StreamIter {
            handle: self.clone(),
            paths,
            item_chunk_pos,
            next_item: 0,
            shared,
            workers,
        })
    }

    fn fetch_chunk(&self, chunk_id: &str) -> Result<Vec<u8>, ChunkFsError> {
        let data = self
            .inner
            .store
            .get(&chunk_key(&self.inner.dataset, chunk_id)?)?;
        if sha256_hex(&data) != chunk_id {
            return Err(ChunkFsError::ChunkDigestMismatch {
                chunk_id: chunk_id.to_string(),
            });
        }
        Ok(data)
    }
}

struct Cursors {
    /// Position in `chunk_seq` of the chunk the consumer needs now.
    consumer_pos: usize,
    /// Next position a prefetch worker will claim.
    next_prefetch: usize,
}

struct StreamShared {
    cursors: Mutex<Cursors>,
    advanced: Condvar,
    shutdown: AtomicBool,
    chunk_seq: Vec<String>,
    depth: usize,
}

fn prefetch_worker(handle: &DatasetHandle, shared: &StreamShared) {
    loop {
        let pos = {
            let mut cursors = shared.cursors.lock().unwrap();
            loop {
                if shared.shutdown.load(Ordering::SeqCst) {
                    return;
                }
                let candidate = cursors.next_prefetch.max(cursors.consumer_pos + 1);
                if candidate >= shared.chunk_seq.len() {
                    return;
                }
                if candidate <= cursors.consumer_pos + shared.depth {
                    cursors.next_prefetch = candidate + 1;
                    break candidate;
                }
                cursors = shared.advanced.wait(cursors).unwrap();
            }
        };
        let chunk_id = &shared.chunk_seq[pos];
        // Errors are ignored here on purpose: the consumer re-attempts the
        // fetch at the yield of the affected item and reports them there.
        let _ = handle
            .inner
            .cache
            .prefetch(chunk_id, || handle.fetch_chunk(chunk_id));
    }
}

/// Iterator over `(path, bytes)` in request order.
pub struct StreamIter {
    handle: DatasetHandle,
    paths: Vec<String>,
    item_chunk_pos: Vec<usize>,
    next_item: usize,
    shared: Arc<StreamShared>,
    workers: Vec<JoinHandle<()>>,
}

impl Iterator for StreamIter {
    type Item = (String, Result<Vec<u8>, ChunkFsError>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next_item >= self.paths.len() {
            return None;
        }
        let i = self.next_item;
        self.next_item += 1;
        {
            let mut cursors = self.shared.cursors.lock().unwrap();
            cursors.consumer_pos = self.item_chunk_pos[i];
            drop(cursors);
            self.shared.advanced.notify_all();
        }
        let path = self.paths[i].clone();
        let result = self.handle.read_file(&path);
        Some((path, result))
    }
}

impl Drop for StreamIter {
    fn drop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        self.shared.advanced.notify_all();
        for worker in self.workers.drain(..) {
            let _ = worker.join();
        }
    }
}
