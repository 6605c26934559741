use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fabric::{DynamicStats, StaticProfile};
use crate::ids::{NodeId, TimestampMs};
use crate::wire::WireError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LivenessState {
    Alive,
    Suspect,
    Dead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipRecord {
    pub node_id: NodeId,
    #[serde(default)]
    pub name: String,
    pub endpoint: String,
    pub services: Vec<String>,
    /// Concurrent job slots offered by the node's executor, 0 if none.
    #[serde(default)]
    pub executor_slots: u32,
    pub static_profile: StaticProfile,
    pub last_stats: DynamicStats,
    pub last_heartbeat_at: TimestampMs,
    pub state: LivenessState,
    /// Highest heartbeat sequence applied since the last register.
    #[serde(default)]
    pub last_sequence: u64,
}

impl MembershipRecord {
    pub fn hosts(&self, service: &str) -> bool {
        self.services.iter().any(|s| s == service)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heartbeat {
    pub node_id: NodeId,
    pub services: Vec<String>,
    pub stats: DynamicStats,
    pub sequence: u64,
    #[serde(default)]
    pub executor_slots: u32,
}

/// Silence thresholds, all measured from the last heartbeat.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timeouts {
    pub suspect_ms: u64,
    pub dead_ms: u64,
    pub purge_ms: u64,
}

impl Timeouts {
    /// 3, 10 and 60 heartbeat intervals.
    pub fn from_heartbeat(interval_ms: u64) -> Self {
        Self { suspect_ms: 3 * interval_ms, dead_ms: 10 * interval_ms, purge_ms: 60 * interval_ms }
    }
}

/// A state change made by [`Catalogue::sweep`]. `to == None` means purged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub node_id: NodeId,
    pub from: LivenessState,
    pub to: Option<LivenessState>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DirectoryError {
    #[error("membership rejected: license allows {max} nodes")]
    LicenseRejected { max: u32 },
    #[error("stale heartbeat {sequence} from {node}, already at {stored}")]
    StaleHeartbeat { node: NodeId, sequence: u64, stored: u64 },
    #[error("node {0} is not registered")]
    UnknownNode(NodeId),
}

impl From<DirectoryError> for WireError {
    fn from(e: DirectoryError) -> Self {
        let code = match e {
            DirectoryError::LicenseRejected { .. } => "LicenseRejected",
            DirectoryError::StaleHeartbeat { .. } => "StaleHeartbeat",
            DirectoryError::UnknownNode(_) => "UnknownNode",
        };
        WireError::new(code, e.to_string())
    }
}

/// Node records keyed (and therefore ordered) by node id.
#[derive(Debug, Clone)]
pub struct Catalogue {
    records: BTreeMap<NodeId, MembershipRecord>,
    timeouts: Timeouts,
    license_max_nodes: u32,
}

impl Catalogue {
    pub fn new(timeouts: Timeouts, license_max_nodes: u32) -> Self {
        Self { records: BTreeMap::new(), timeouts, license_max_nodes }
    }

    pub fn timeouts(&self) -> Timeouts {
        self.timeouts
    }

    /// Count of alive and suspect records, which is what the license caps.
    pub fn live_count(&self) -> usize {
        self.records.values().filter(|r| r.state != LivenessState::Dead).count()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, node: NodeId) -> Option<&MembershipRecord> {
        self.records.get(&node)
    }

    pub fn records(&self) -> impl Iterator<Item = &MembershipRecord> {
        self.records.values()
    }

    /// Store `record` as alive. Re-registering a known node replaces its
    /// record and resets its heartbeat sequence.
    pub fn register(&mut self, mut record: MembershipRecord, now: TimestampMs) -> Result<(), DirectoryError> {
        if self.license_max_nodes > 0 {
            let others = self
                .records
                .values()
                .filter(|r| r.node_id != record.node_id && r.state != LivenessState::Dead)
                .count();
            if others + 1 > self.license_max_nodes as usize {
                return Err(DirectoryError::LicenseRejected { max: self.license_max_nodes });
            }
        }
        record.state = LivenessState::Alive;
        record.last_heartbeat_at = now;
        record.last_sequence = 0;
        self.records.insert(record.node_id, record);
        Ok(())
    }

    /// Apply a heartbeat. Dead and unknown nodes must register again.
    pub fn heartbeat(&mut self, hb: &Heartbeat, now: TimestampMs) -> Result<(), DirectoryError> {
        let record = self.records.get_mut(&hb.node_id).ok_or(DirectoryError::UnknownNode(hb.node_id))?;
        if record.state == LivenessState::Dead {
            return Err(DirectoryError::UnknownNode(hb.node_id));
        }
        if hb.sequence <= record.last_sequence {
            return Err(DirectoryError::StaleHeartbeat {
                node: hb.node_id,
                sequence: hb.sequence,
                stored: record.last_sequence,
            });
        }
        record.last_sequence = hb.sequence;
        record.last_heartbeat_at = now;
        record.last_stats = hb.stats.clone();
        record.services = hb.services.clone();
        record.executor_slots = hb.executor_slots;
        record.state = LivenessState::Alive;
        Ok(())
    }

    /// Non-dead records hosting `service`, or every record when `None`.
    pub fn query(&self, service: Option<&str>) -> Vec<MembershipRecord> {
        self.records
            .values()
            .filter(|r| match service {
                Some(name) => r.state != LivenessState::Dead && r.hosts(name),
                None => true,
            })
            .cloned()
            .collect()
    }

    pub fn leave(&mut self, node: NodeId) -> Option<MembershipRecord> {
        self.records.remove(&node)
    }

    /// Advance liveness by silence. A long-silent node may move through
    /// several states in one call.
    pub fn sweep(&mut self, now: TimestampMs) -> Vec<Transition> {
        let t = self.timeouts;
        let mut transitions = Vec::new();
        let mut purge = Vec::new();
        for record in self.records.values_mut() {
            let silent = now.saturating_sub(record.last_heartbeat_at);
            if record.state == LivenessState::Alive && silent > t.suspect_ms {
                transitions.push(Transition {
                    node_id: record.node_id,
                    from: LivenessState::Alive,
                    to: Some(LivenessState::Suspect),
                });
                record.state = LivenessState::Suspect;
            }
            if record.state == LivenessState::Suspect && silent > t.dead_ms {
                transitions.push(Transition {
                    node_id: record.node_id,
                    from: LivenessState::Suspect,
                    to: Some(LivenessState::Dead),
                });
                record.state = LivenessState::Dead;
            }
            if record.state == LivenessState::Dead && silent > t.purge_ms {
                transitions.push(Transition { node_id: record.node_id, from: LivenessState::Dead, to: None });
                purge.push(record.node_id);
            }
        }
        for node in purge {
            self.records.remove(&node);
        }
        transitions
    }

    /// Reload records from a snapshot, giving every node a fresh grace period.
    pub fn restore(&mut self, records: Vec<MembershipRecord>, now: TimestampMs) {
        for mut r in records {
            if r.state != LivenessState::Dead {
                r.last_heartbeat_at = now;
            }
            self.records.insert(r.node_id, r);
        }
    }
}
