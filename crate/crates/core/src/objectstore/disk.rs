//! Local-disk backend.
//!
//! Layout is `<root>/<bucket>/<key>` with object bytes stored verbatim (no
//! envelope), so datasets can be inspected out of band. Writes go through a
//! temp file plus rename so a crashed put never leaves a torn object.

use std::fs;
use std::path::{Path, PathBuf};

use super::{ObjectKey, ObjectStore, ObjectStoreStats, StatsCell, StoreError};

#[derive(Debug)]
pub struct DiskStore {
    root: PathBuf,
    stats: StatsCell,
}

impl DiskStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            stats: StatsCell::default(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn object_path(&self, key: &ObjectKey) -> PathBuf {
        let mut p = self.root.join(&key.bucket);
        for seg in key.key.split('/') {
            p.push(seg);
        }
        p
    }
}

impl ObjectStore for DiskStore {
    fn put(&self, key: &ObjectKey, data: &[u8]) -> Result<(), StoreError> {
        let path = self.object_path(key);
        let dir = path.parent().expect("object path has a parent");
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".tmp-{}-{}",
            std::process::id(),
            path.file_name().unwrap().to_string_lossy()
        ));
        fs::write(&tmp, data)?;
        fs::rename(&tmp, &path)?;
        self.stats.record_put(data.len() as u64);
        Ok(())
    }

    fn get(&self, key: &ObjectKey) -> Result<Vec<u8>, StoreError> {
        let path = self.object_path(key);
        let data = match fs::read(&path) {
            Ok(data) => data,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound(key.clone()))
            }
            Err(e) => return Err(e.into()),
        };
        self.stats.record_get(data.len() as u64);
        Ok(data)
    }

    fn list(&self, prefix: &ObjectKey) -> Result<Vec<ObjectKey>, StoreError> {
        let bucket_dir = self.root.join(&prefix.bucket);
        let mut keys = Vec::new();
        if bucket_dir.is_dir() {
            collect_keys(&bucket_dir, String::new(), &mut keys)?;
        }
        keys.retain(|k| k.starts_with(&prefix.key));
        keys.sort();
        self.stats.record_list();
        Ok(keys
            .into_iter()
            .map(|key| ObjectKey {
                bucket: prefix.bucket.clone(),
                key,
            })
            .collect())
    }

    fn buckets(&self) -> Result<Vec<String>, StoreError> {
        let mut buckets = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                buckets.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        buckets.sort();
        Ok(buckets)
    }

    fn stats(&self) -> ObjectStoreStats {
        self.stats.snapshot()
    }
}

fn collect_keys(dir: &Path, rel: String, out: &mut Vec<String>) -> Result<(), StoreError> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with(".tmp-") {
            continue;
        }
        let child_rel = if rel.is_empty() {
            name
        } else {
            format!("{rel}/{name}")
        };
        if entry.file_type()?.is_dir() {
            collect_keys(&entry.path(), child_rel, out)?;
        } else {
            out.push(child_rel);
        }
    }
    Ok(())
}
