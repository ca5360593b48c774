//! Chunked dataset layer over object storage.
//!
//! A file tree is packed into fixed-target-size chunks: files are visited in
//! lexicographic path order and appended greedily to the current chunk until
//! the next whole file would exceed the target, at which point the chunk is
//! sealed. A file larger than the target is split at exact target boundaries
//! into dedicated chunks. Chunk ids are SHA-256 digests of the chunk bytes,
//! so uploads are idempotent and restartable, and any corruption is caught
//! at read time.
//!
//! Object layout, byte-exact:
//! - chunk objects at `<dataset>/chunks/<hex-digest>`, raw bytes;
//! - the manifest at `<dataset>/manifest`, canonical JSON (sorted keys) of
//!   the form `{"manifest": {...}, "sha256": "<hex of canonical manifest>"}`.
//!
//! Datasets are immutable after upload; reads go through a per-handle LRU
//! chunk cache with optional background prefetch ([`DatasetHandle::stream`]).

mod cache;
mod handle;

pub use cache::CacheMetrics;
pub use handle::{open_dataset, DatasetHandle, StreamIter};

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objectstore::{ObjectKey, ObjectStore, StoreError};
use crate::util::{canonical_json, sha256_hex};

/// Production default, inside the 12–100 MB guidance; tests use KiB-scale
/// targets, the packing is size-agnostic.
pub const DEFAULT_CHUNK_TARGET: u64 = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ChunkFsError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("file not in manifest: {0}")]
    FileNotInManifest(String),
    #[error("chunk {chunk_id} bytes do not match their digest")]
    ChunkDigestMismatch { chunk_id: String },
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// A slice of one chunk belonging to one file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extent {
    pub chunk_id: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Logical path, `/`-separated, relative to the dataset root.
    pub path: String,
    pub size: u64,
    /// Ordered by file offset. Empty files carry no extents.
    pub extents: Vec<Extent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    /// Hex SHA-256 of the chunk bytes.
    pub id: String,
    pub size: u64,
    pub object_key: ObjectKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkManifest {
    pub dataset: String,
    pub chunk_target: u64,
    /// Upload order == lexicographic path order.
    pub files: Vec<FileEntry>,
    pub chunks: Vec<Chunk>,
}

impl ChunkManifest {
    pub fn file(&self, path: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.path == path)
    }

    pub fn chunk(&self, id: &str) -> Option<&Chunk> {
        self.chunks.iter().find(|c| c.id == id)
    }

    pub fn total_bytes(&self) -> u64 {
        self.files.iter().map(|f| f.size).sum()
    }

    /// Structural invariants; violated manifests are treated as corrupt.
    pub fn validate(&self) -> Result<(), ChunkFsError> {
        let corrupt = |msg: String| Err(ChunkFsError::CorruptManifest(msg));
        let chunk_ids: BTreeSet<&str> = self.chunks.iter().map(|c| c.id.as_str()).collect();
        if chunk_ids.len() != self.chunks.len() {
            return corrupt("duplicate chunk entries".into());
        }
        for chunk in &self.chunks {
            if chunk.size == 0 || chunk.size > self.chunk_target {
                return corrupt(format!("chunk {} has size {}", chunk.id, chunk.size));
            }
        }
        let mut spans: Vec<(&str, u64, u64)> = Vec::new();
        for file in &self.files {
            let mut total = 0u64;
            for extent in &file.extents {
                if !chunk_ids.contains(extent.chunk_id.as_str()) {
                    return corrupt(format!(
                        "file {} references unknown chunk {}",
                        file.path, extent.chunk_id
                    ));
                }
                total += extent.length;
                spans.push((extent.chunk_id.as_str(), extent.offset, extent.length));
            }
            if total != file.size {
                return corrupt(format!(
                    "file {} extents cover {total} of {} bytes",
                    file.path, file.size
                ));
            }
            if file.size > 0 && file.size <= self.chunk_target && file.extents.len() != 1 {
                return corrupt(format!(
                    "small file {} should have exactly one extent",
                    file.path
                ));
            }
        }
        // No two extents partially overlap within a chunk. Exact-duplicate
        // spans are fine: identical content deduplicates to one chunk id,
        // so several extents may alias the same stored bytes.
        spans.sort();
        for pair in spans.windows(2) {
            let (chunk_a, off_a, len_a) = pair[0];
            let (chunk_b, off_b, len_b) = pair[1];
            if chunk_a == chunk_b
                && off_a + len_a > off_b
                && !(off_a == off_b && len_a == len_b)
            {
                return corrupt(format!("overlapping extents in chunk {chunk_a}"));
            }
        }
        Ok(())
    }

    /// Canonical serialized form with an embedded content digest.
    pub fn to_bytes(&self) -> Vec<u8> {
        let body = canonical_json(self);
        let envelope = serde_json::json!({
            "manifest": serde_json::from_str::<serde_json::Value>(&body).unwrap(),
            "sha256": sha256_hex(body.as_bytes()),
        });
        canonical_json(&envelope).into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ChunkFsError> {
        let corrupt = |msg: String| ChunkFsError::CorruptManifest(msg);
        let envelope: serde_json::Value = serde_json::from_slice(bytes)
            .map_err(|e| corrupt(format!("not valid JSON: {e}")))?;
        let body = envelope
            .get("manifest")
            .ok_or_else(|| corrupt("missing manifest field".into()))?;
        let digest = envelope
            .get("sha256")
            .and_then(|v| v.as_str())
            .ok_or_else(|| corrupt("missing sha256 field".into()))?;
        let body_canonical = canonical_json(body);
        if sha256_hex(body_canonical.as_bytes()) != digest {
            return Err(corrupt("digest mismatch".into()));
        }
        let manifest: ChunkManifest = serde_json::from_value(body.clone())
            .map_err(|e| corrupt(format!("bad manifest body: {e}")))?;
        manifest.validate()?;
        Ok(manifest)
    }
}

pub fn manifest_key(dataset: &str) -> Result<ObjectKey, StoreError> {
    ObjectKey::new(dataset, "manifest")
}

pub fn chunk_key(dataset: &str, chunk_id: &str) -> Result<ObjectKey, StoreError> {
    ObjectKey::new(dataset, format!("chunks/{chunk_id}"))
}

/// What an upload did; `manifest` is the authoritative result.
#[derive(Debug, Clone)]
pub struct UploadReport {
    pub manifest: ChunkManifest,
    pub chunks_uploaded: usize,
    /// Chunks already present in the store (restart or identical content).
    pub chunks_skipped: usize,
}

/// Pack `local_root` into chunks and upload it as `dataset`.
///
/// Restartable: chunk ids already present under `<dataset>/chunks/` are not
/// re-uploaded.
pub fn upload_tree(
    local_root: &Path,
    dataset: &str,
    chunk_target: u64,
    store: &dyn ObjectStore,
) -> Result<UploadReport, ChunkFsError> {
    assert!(chunk_target > 0, "chunk_target must be positive");
    let mut paths = Vec::new();
    walk_files(local_root, local_root, &mut paths)?;
    paths.sort();

    let present: BTreeSet<String> = store
        .list(&ObjectKey::prefix(dataset, "chunks/")?)?
        .into_iter()
        .filter_map(|k| k.key.strip_prefix("chunks/").map(str::to_string))
        .collect();

    let mut packer = Packer {
        dataset,
        chunk_target,
        store,
        present,
        files: Vec::new(),
        chunks: Vec::new(),
        open: Vec::new(),
        open_refs: Vec::new(),
        uploaded: 0,
        skipped: 0,
    };

    for rel in paths {
        let data = fs::read(local_root.join(&rel))?;
        packer.add_file(rel, &data)?;
    }
    packer.seal()?;

    let manifest = ChunkManifest {
        dataset: dataset.to_string(),
        chunk_target,
        files: packer.files,
        chunks: packer.chunks,
    };
    manifest.validate().expect("packer output satisfies invariants");
    store.put(&manifest_key(dataset)?, &manifest.to_bytes())?;
    Ok(UploadReport {
        manifest,
        chunks_uploaded: packer.uploaded,
        chunks_skipped: packer.skipped,
    })
}

struct Packer<'a> {
    dataset: &'a str,
    chunk_target: u64,
    store: &'a dyn ObjectStore,
    present: BTreeSet<String>,
    files: Vec<FileEntry>,
    chunks: Vec<Chunk>,
    open: Vec<u8>,
    /// (file index, offset in open chunk, length)
    open_refs: Vec<(usize, u64, u64)>,
    uploaded: usize,
    skipped: usize,
}

impl Packer<'_> {
    fn add_file(&mut self, path: String, data: &[u8]) -> Result<(), ChunkFsError> {
        let file_idx = self.files.len();
        self.files.push(FileEntry {
            path,
            size: data.len() as u64,
            extents: Vec::new(),
        });
        if data.is_empty() {
            return Ok(());
        }
        if data.len() as u64 > self.chunk_target {
            // Oversized: dedicated chunks split at exact target boundaries.
            self.seal()?;
            for piece in data.chunks(self.chunk_target as usize) {
                self.open.extend_from_slice(piece);
                self.open_refs.push((file_idx, 0, piece.len() as u64));
                self.seal()?;
            }
            return Ok(());
        }
        if self.open.len() as u64 + data.len() as u64 > self.chunk_target {
            self.seal()?;
        }
        let offset = self.open.len() as u64;
        self.open.extend_from_slice(data);
        self.open_refs.push((file_idx, offset, data.len() as u64));
        Ok(())
    }

    fn seal(&mut self) -> Result<(), ChunkFsError> {
        if self.open.is_empty() {
            return Ok(());
        }
        let bytes = std::mem::take(&mut self.open);
        let refs = std::mem::take(&mut self.open_refs);
        let id = sha256_hex(&bytes);
        for (file_idx, offset, length) in refs {
            self.files[file_idx].extents.push(Extent {
                chunk_id: id.clone(),
                offset,
                length,
            });
        }
        if self.chunks.iter().all(|c| c.id != id) {
            self.chunks.push(Chunk {
                id: id.clone(),
                size: bytes.len() as u64,
                object_key: chunk_key(self.dataset, &id)?,
            });
        }
        if self.present.contains(&id) {
            self.skipped += 1;
        } else {
            self.store.put(&chunk_key(self.dataset, &id)?, &bytes)?;
            self.present.insert(id);
            self.uploaded += 1;
        }
        Ok(())
    }
}

fn walk_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), ChunkFsError> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if entry.file_type()?.is_dir() {
            walk_files(root, &path, out)?;
        } else {
            let rel: PathBuf = path.strip_prefix(root).expect("walk stays under root").into();
            let rel = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            out.push(rel);
        }
    }
    Ok(())
}

/// Write every file of an open dataset into `dest`, preserving paths.
pub fn materialize_to_dir(handle: &DatasetHandle, dest: &Path) -> Result<(), ChunkFsError> {
    for file in &handle.manifest().files {
        let data = handle.read_file(&file.path)?;
        let target = dest.join(file.path.replace('/', std::path::MAIN_SEPARATOR_STR));
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(target, data)?;
    }
    Ok(())
}
