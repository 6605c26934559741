use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::appmodel::{ClientError, CloudClient};
use crate::directory::{LivenessState, MembershipRecord};
use crate::execution::{JobState, SchedulerStats};
use crate::ids::{now_ms, NodeId, TimestampMs};
use crate::reservation::{Reservation, ReservationState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub node_id: NodeId,
    pub name: String,
    pub endpoint: String,
    pub state: LivenessState,
    pub services: Vec<String>,
    pub slots_busy: u32,
    pub slots_total: u32,
    pub cpu_percent: f64,
    pub available_memory_mb: u64,
    pub total_memory_mb: u64,
}

/// Cloud-wide figures sampled at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudStats {
    pub nodes: Vec<NodeStats>,
    pub nodes_alive: usize,
    pub jobs_by_state: BTreeMap<JobState, usize>,
    pub reservations_active: usize,
    /// Completed jobs per minute over the last five minutes.
    pub throughput_per_min: f64,
    pub sampled_at: TimestampMs,
}

impl CloudStats {
    pub fn compute(
        records: &[MembershipRecord],
        scheduler: &SchedulerStats,
        reservations: &[Reservation],
        sampled_at: TimestampMs,
    ) -> Self {
        let nodes: Vec<NodeStats> = records
            .iter()
            .map(|r| {
                let exec = scheduler.executors.iter().find(|e| e.node_id == r.node_id);
                NodeStats {
                    node_id: r.node_id,
                    name: r.name.clone(),
                    endpoint: r.endpoint.clone(),
                    state: r.state,
                    services: r.services.clone(),
                    slots_busy: exec.map_or(0, |e| e.slots_busy),
                    slots_total: if r.hosts("executor") { r.executor_slots } else { 0 },
                    cpu_percent: r.last_stats.cpu_usage_percent,
                    available_memory_mb: r.last_stats.available_memory_mb,
                    total_memory_mb: r.static_profile.total_memory_mb,
                }
            })
            .collect();
        Self {
            nodes_alive: nodes.iter().filter(|n| n.state == LivenessState::Alive).count(),
            nodes,
            jobs_by_state: scheduler.jobs_by_state.clone(),
            reservations_active: reservations.iter().filter(|r| r.state == ReservationState::Active).count(),
            throughput_per_min: scheduler.throughput_per_min,
            sampled_at,
        }
    }

    /// Fetch everything from the master and combine it.
    pub async fn collect(client: &CloudClient) -> Result<Self, ClientError> {
        let records = client.nodes().await?;
        let scheduler = client.scheduler_stats().await?;
        let reservations = client.reservations().await?;
        Ok(Self::compute(&records, &scheduler, &reservations, now_ms()))
    }

    pub fn jobs_total(&self) -> usize {
        self.jobs_by_state.values().sum()
    }

    /// Plain-text table for terminals.
    pub fn render(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let jobs: Vec<String> = self.jobs_by_state.iter().map(|(s, n)| format!("{}={n}", s.as_str())).collect();
        let _ = writeln!(
            out,
            "nodes alive: {}/{}  reservations active: {}  throughput: {:.1} jobs/min",
            self.nodes_alive,
            self.nodes.len(),
            self.reservations_active,
            self.throughput_per_min
        );
        let _ = writeln!(out, "jobs: {}", if jobs.is_empty() { "none".into() } else { jobs.join(" ") });
        let _ = writeln!(out, "{:<16} {:<8} {:>7} {:>6} {:>10}  services", "node", "state", "slots", "cpu%", "mem MB");
        for n in &self.nodes {
            let state = format!("{:?}", n.state).to_lowercase();
            let _ = writeln!(
                out,
                "{:<16} {:<8} {:>7} {:>6.1} {:>10}  {}",
                truncate(&n.name, 16),
                state,
                format!("{}/{}", n.slots_busy, n.slots_total),
                n.cpu_percent,
                format!("{}/{}", n.available_memory_mb, n.total_memory_mb),
                n.services.join(",")
            );
        }
        out
    }
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}
