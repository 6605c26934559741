//! Snapshot persistence: a volatile in-memory provider and a durable
//! checksummed snapshot-file store.
//!
//! Durable snapshot file layout (all integers big-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "CSNP"
//!      4     2  format version (1)
//!      6     2  reserved, zero
//!      8     8  snapshot sequence
//!     16     8  body length N
//!     24    32  SHA-256 of the body
//!     56     N  body: UTF-8 JSON of CloudSnapshot
//! ```
//!
//! Files are named `snapshot-<sequence, 20 digits>.snap`, written to a
//! temporary name, fsynced and renamed into place. The newest three are kept.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::directory::MembershipRecord;
use crate::execution::{ApplicationRecord, JobDescriptor, TerminalRecord};
use crate::reservation::{AllocationMap, Reservation, ReservationState};
use crate::storage::FileDescriptor;
use crate::transversal::accounting::Accountant;

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"CSNP";
pub const SNAPSHOT_VERSION: u16 = 1;
const HEADER_LEN: usize = 56;
const KEEP_SNAPSHOTS: usize = 3;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CloudSnapshot {
    pub snapshot_sequence: u64,
    #[serde(default)]
    pub applications: Vec<ApplicationRecord>,
    #[serde(default)]
    pub jobs: Vec<JobDescriptor>,
    #[serde(default)]
    pub terminal_log: Vec<TerminalRecord>,
    #[serde(default)]
    pub usage: Option<Accountant>,
    #[serde(default)]
    pub reservations: Vec<Reservation>,
    #[serde(default)]
    pub allocation_map: AllocationMap,
    #[serde(default)]
    pub members: Vec<MembershipRecord>,
    #[serde(default)]
    pub storage_catalogue: Vec<FileDescriptor>,
}

impl CloudSnapshot {
    /// Check cross-references: every job's application exists and every
    /// allocation entry points at a live reservation.
    pub fn validate(&self) -> Result<(), String> {
        let apps: HashSet<_> = self.applications.iter().map(|a| a.app_id).collect();
        if let Some(job) = self.jobs.iter().find(|j| !apps.contains(&j.app_id)) {
            return Err(format!("job {} references unknown application {}", job.job_id, job.app_id));
        }
        let live: HashSet<_> = self
            .reservations
            .iter()
            .filter(|r| matches!(r.state, ReservationState::Confirmed | ReservationState::Active))
            .map(|r| r.reservation_id)
            .collect();
        for (node, entries) in self.allocation_map.nodes() {
            for entry in entries {
                if !live.contains(&entry.reservation_id) {
                    return Err(format!(
                        "allocation on {node} references missing reservation {}",
                        entry.reservation_id
                    ));
                }
            }
        }
        self.allocation_map.check_non_overlapping()
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("every stored snapshot failed its integrity check")]
    StoreCorrupt,
    #[error("store unavailable: {0}")]
    StoreUnavailable(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::StoreUnavailable(e.to_string())
    }
}

pub trait PersistenceProvider: Send + Sync {
    fn name(&self) -> &str;
    fn persist(&self, snapshot: &CloudSnapshot) -> Result<(), StoreError>;
    /// `Ok(None)` when nothing has been stored.
    fn restore(&self) -> Result<Option<CloudSnapshot>, StoreError>;
}

/// Fast and unreliable: contents live only as long as this value.
#[derive(Debug, Default)]
pub struct VolatileStore {
    latest: Mutex<Option<CloudSnapshot>>,
}

impl VolatileStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl PersistenceProvider for VolatileStore {
    fn name(&self) -> &str {
        "volatile"
    }

    fn persist(&self, snapshot: &CloudSnapshot) -> Result<(), StoreError> {
        *self.latest.lock().expect("volatile store poisoned") = Some(snapshot.clone());
        Ok(())
    }

    fn restore(&self) -> Result<Option<CloudSnapshot>, StoreError> {
        Ok(self.latest.lock().expect("volatile store poisoned").clone())
    }
}

/// Checksummed snapshot files in one directory.
#[derive(Debug)]
pub struct DurableStore {
    dir: PathBuf,
}

impl DurableStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn file_name(sequence: u64) -> String {
        format!("snapshot-{sequence:020}.snap")
    }

    /// Stored snapshot files, newest first.
    pub fn snapshot_files(&self) -> Result<Vec<(u64, PathBuf)>, StoreError> {
        let mut files = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let entry = entry?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            let Some(seq) = name
                .strip_prefix("snapshot-")
                .and_then(|s| s.strip_suffix(".snap"))
                .and_then(|s| s.parse::<u64>().ok())
            else {
                continue;
            };
            files.push((seq, entry.path()));
        }
        files.sort_by(|a, b| b.0.cmp(&a.0));
        Ok(files)
    }
}

pub fn encode_snapshot(snapshot: &CloudSnapshot) -> Vec<u8> {
    let body = serde_json::to_vec(snapshot).expect("snapshot serializes");
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.extend_from_slice(&SNAPSHOT_VERSION.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&snapshot.snapshot_sequence.to_be_bytes());
    out.extend_from_slice(&(body.len() as u64).to_be_bytes());
    out.extend_from_slice(&Sha256::digest(&body));
    out.extend_from_slice(&body);
    out
}

/// Decode and verify one snapshot file image.
pub fn decode_snapshot(bytes: &[u8]) -> Result<CloudSnapshot, String> {
    if bytes.len() < HEADER_LEN {
        return Err("short header".into());
    }
    if &bytes[0..4] != SNAPSHOT_MAGIC {
        return Err("bad magic".into());
    }
    let version = u16::from_be_bytes([bytes[4], bytes[5]]);
    if version != SNAPSHOT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let sequence = u64::from_be_bytes(bytes[8..16].try_into().unwrap());
    let len = u64::from_be_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != len {
        return Err(format!("body is {} bytes, header says {len}", body.len()));
    }
    if Sha256::digest(body).as_slice() != &bytes[24..56] {
        return Err("checksum mismatch".into());
    }
    let snapshot: CloudSnapshot = serde_json::from_slice(body).map_err(|e| e.to_string())?;
    if snapshot.snapshot_sequence != sequence {
        return Err("sequence mismatch between header and body".into());
    }
    snapshot.validate()?;
    Ok(snapshot)
}

impl PersistenceProvider for DurableStore {
    fn name(&self) -> &str {
        "durable"
    }

    fn persist(&self, snapshot: &CloudSnapshot) -> Result<(), StoreError> {
        let bytes = encode_snapshot(snapshot);
        let final_path = self.dir.join(Self::file_name(snapshot.snapshot_sequence));
        let tmp_path = self.dir.join(format!(".snapshot-{}.tmp", snapshot.snapshot_sequence));
        {
            let mut file = File::create(&tmp_path)?;
            file.write_all(&bytes)?;
            file.sync_all()?;
        }
        fs::rename(&tmp_path, &final_path)?;
        if let Ok(dir) = File::open(&self.dir) {
            let _ = dir.sync_all();
        }
        for (_, stale) in self.snapshot_files()?.into_iter().skip(KEEP_SNAPSHOTS) {
            let _ = fs::remove_file(stale);
        }
        Ok(())
    }

    fn restore(&self) -> Result<Option<CloudSnapshot>, StoreError> {
        let files = self.snapshot_files()?;
        if files.is_empty() {
            return Ok(None);
        }
        for (seq, path) in &files {
            let bytes = fs::read(path)?;
            match decode_snapshot(&bytes) {
                Ok(snapshot) => return Ok(Some(snapshot)),
                Err(why) => tracing::warn!(sequence = seq, %why, "skipping damaged snapshot"),
            }
        }
        Err(StoreError::StoreCorrupt)
    }
}

/// Collects the latest state published by each master service and writes
/// whole snapshots through the configured provider.
pub struct SnapshotHub {
    provider: Arc<dyn PersistenceProvider>,
    state: Mutex<HubState>,
}

struct HubState {
    current: CloudSnapshot,
    dirty: bool,
}

impl std::fmt::Debug for SnapshotHub {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SnapshotHub")
            .field("provider", &self.provider.name())
            .field("sequence", &self.sequence())
            .finish()
    }
}

impl SnapshotHub {
    /// Restore from `provider` and seed the hub with what was found.
    pub fn open(provider: Arc<dyn PersistenceProvider>) -> Result<(Self, Option<CloudSnapshot>), StoreError> {
        let restored = provider.restore()?;
        let current = restored.clone().unwrap_or_default();
        Ok((Self { provider, state: Mutex::new(HubState { current, dirty: false }) }, restored))
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    /// Apply a change to the staged snapshot. Nothing is written.
    pub fn update(&self, f: impl FnOnce(&mut CloudSnapshot)) {
        let mut state = self.state.lock().expect("hub poisoned");
        f(&mut state.current);
        state.dirty = true;
    }

    /// Write the staged snapshot under the next sequence number.
    pub fn persist_now(&self) -> Result<u64, StoreError> {
        let mut state = self.state.lock().expect("hub poisoned");
        state.current.snapshot_sequence += 1;
        if let Err(e) = self.provider.persist(&state.current) {
            state.current.snapshot_sequence -= 1;
            return Err(e);
        }
        state.dirty = false;
        Ok(state.current.snapshot_sequence)
    }

    /// Persist only when something changed since the last write.
    pub fn persist_if_dirty(&self) -> Result<Option<u64>, StoreError> {
        let dirty = self.state.lock().expect("hub poisoned").dirty;
        if dirty {
            self.persist_now().map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn sequence(&self) -> u64 {
        self.state.lock().expect("hub poisoned").current.snapshot_sequence
    }

    pub fn current(&self) -> CloudSnapshot {
        self.state.lock().expect("hub poisoned").current.clone()
    }
}
