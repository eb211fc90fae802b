//! On-disk volume store with an in-memory index.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use cipherray_core::EncVolume;
use serde::{Deserialize, Serialize};

/// Plaintext metadata of a stored volume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeRecord {
    pub id: String,
    pub fingerprint: String,
    pub encoding_dim: usize,
    pub dims: [usize; 3],
    pub modulus_bits: u64,
    pub gamma: u32,
    pub bytes: u64,
    pub created_at: u64,
    pub path: PathBuf,
}

struct Entry {
    record: VolumeRecord,
    volume: Arc<EncVolume>,
}

pub struct VolumeStore {
    dir: PathBuf,
    entries: RwLock<HashMap<String, Entry>>,
}

impl VolumeStore {
    /// Opens `dir`, loading every `.cvol` already in it.
    pub fn open(dir: impl Into<PathBuf>) -> anyhow::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        let mut entries = HashMap::new();
        for item in std::fs::read_dir(&dir)? {
            let path = item?.path();
            if path.extension().is_none_or(|e| e != "cvol") {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned) else {
                continue;
            };
            match load_entry(&id, &path) {
                Ok(entry) => {
                    entries.insert(id, entry);
                }
                Err(e) => tracing::warn!(path = %path.display(), error = %e, "skipping unreadable volume"),
            }
        }
        Ok(VolumeStore {
            dir,
            entries: RwLock::new(entries),
        })
    }

    /// Persists an already parsed volume under a fresh id.
    pub fn insert(&self, bytes: &[u8], volume: EncVolume) -> anyhow::Result<VolumeRecord> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let path = self.dir.join(format!("{id}.cvol"));
        let tmp = self.dir.join(format!("{id}.partial"));
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, &path)?;
        let record = make_record(&id, &path, &volume, bytes.len() as u64, now());
        let meta = serde_json::to_vec(&record.created_at)?;
        std::fs::write(self.dir.join(format!("{id}.created")), meta)?;
        self.entries.write().expect("store lock").insert(
            id,
            Entry {
                record: record.clone(),
                volume: Arc::new(volume),
            },
        );
        Ok(record)
    }

    pub fn get(&self, id: &str) -> Option<(VolumeRecord, Arc<EncVolume>)> {
        self.entries
            .read()
            .expect("store lock")
            .get(id)
            .map(|e| (e.record.clone(), e.volume.clone()))
    }

    pub fn list(&self) -> Vec<VolumeRecord> {
        let mut out: Vec<VolumeRecord> = self
            .entries
            .read()
            .expect("store lock")
            .values()
            .map(|e| e.record.clone())
            .collect();
        out.sort_by(|a, b| (a.created_at, &a.id).cmp(&(b.created_at, &b.id)));
        out
    }

    /// Removes a volume; unknown ids are not an error.
    pub fn remove(&self, id: &str) -> anyhow::Result<bool> {
        let removed = self.entries.write().expect("store lock").remove(id);
        if let Some(entry) = &removed {
            remove_if_present(&entry.record.path)?;
            remove_if_present(&self.dir.join(format!("{id}.created")))?;
        }
        Ok(removed.is_some())
    }

    pub fn path_of(&self, id: &str) -> Option<PathBuf> {
        self.entries
            .read()
            .expect("store lock")
            .get(id)
            .map(|e| e.record.path.clone())
    }
}

fn load_entry(id: &str, path: &Path) -> anyhow::Result<Entry> {
    let volume = EncVolume::load(path)?;
    let bytes = std::fs::metadata(path)?.len();
    let created_path = path.with_extension("created");
    let created_at = std::fs::read(&created_path)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or_else(now);
    Ok(Entry {
        record: make_record(id, path, &volume, bytes, created_at),
        volume: Arc::new(volume),
    })
}

fn make_record(id: &str, path: &Path, v: &EncVolume, bytes: u64, created_at: u64) -> VolumeRecord {
    VolumeRecord {
        id: id.to_owned(),
        fingerprint: hex::encode(v.fingerprint()),
        encoding_dim: v.encoding_dim(),
        dims: v.dims(),
        modulus_bits: v.public_key().bits(),
        gamma: v.gamma(),
        bytes,
        created_at,
        path: path.to_owned(),
    }
}

fn remove_if_present(path: &Path) -> std::io::Result<()> {
    match std::fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e),
        _ => Ok(()),
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
