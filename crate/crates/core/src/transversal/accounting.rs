//! Usage accounting per execution attempt and tariff-based pricing.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::ids::{AppId, JobId, NodeId, TimestampMs};

/// One execution attempt that reached `running`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub user_id: String,
    pub app_id: AppId,
    pub job_id: JobId,
    pub node_id: NodeId,
    pub attempt: u32,
    pub started_at: TimestampMs,
    pub ended_at: TimestampMs,
    /// Elapsed time rounded up to whole seconds.
    pub charged_seconds: u64,
}

/// Elapsed milliseconds rounded up to whole seconds.
pub fn charged_seconds(started_at: TimestampMs, ended_at: TimestampMs) -> u64 {
    ended_at.saturating_sub(started_at).div_ceil(1000)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tariff {
    /// Billing unit length in seconds (3600 bills per started hour).
    pub granularity_s: u64,
    /// Price per unit per node.
    pub rate: f64,
}

impl Default for Tariff {
    fn default() -> Self {
        Self { granularity_s: 3600, rate: 1.0 }
    }
}

/// Σ ceil(charged_seconds / granularity) × rate.
pub fn price(records: &[UsageRecord], tariff: &Tariff) -> f64 {
    let granularity = tariff.granularity_s.max(1);
    records
        .iter()
        .map(|r| r.charged_seconds.div_ceil(granularity) as f64 * tariff.rate)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OpenAttempt {
    user_id: String,
    app_id: AppId,
    node_id: NodeId,
    started_at: TimestampMs,
}

/// Turns job lifecycle events into [`UsageRecord`]s.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Accountant {
    #[serde(with = "open_map")]
    open: HashMap<(JobId, u32), OpenAttempt>,
    records: Vec<UsageRecord>,
}

impl Accountant {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on_running(
        &mut self,
        user_id: &str,
        app_id: AppId,
        job_id: JobId,
        attempt: u32,
        node_id: NodeId,
        started_at: TimestampMs,
    ) {
        self.open.entry((job_id, attempt)).or_insert(OpenAttempt {
            user_id: user_id.to_string(),
            app_id,
            node_id,
            started_at,
        });
    }

    /// Close an attempt. Attempts that never ran produce no record.
    pub fn on_end(&mut self, job_id: JobId, attempt: u32, ended_at: TimestampMs) -> Option<UsageRecord> {
        let open = self.open.remove(&(job_id, attempt))?;
        let ended_at = ended_at.max(open.started_at);
        let record = UsageRecord {
            user_id: open.user_id,
            app_id: open.app_id,
            job_id,
            node_id: open.node_id,
            attempt,
            started_at: open.started_at,
            ended_at,
            charged_seconds: charged_seconds(open.started_at, ended_at),
        };
        self.records.push(record.clone());
        Some(record)
    }

    pub fn records(&self) -> &[UsageRecord] {
        &self.records
    }

    pub fn charged_by_node(&self) -> BTreeMap<NodeId, u64> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.node_id).or_insert(0) += r.charged_seconds;
        }
        out
    }

    pub fn records_for_user(&self, user_id: &str) -> Vec<UsageRecord> {
        self.records.iter().filter(|r| r.user_id == user_id).cloned().collect()
    }
}

mod open_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(map: &HashMap<(JobId, u32), OpenAttempt>, s: S) -> Result<S::Ok, S::Error> {
        let list: Vec<(&JobId, &u32, &OpenAttempt)> = map.iter().map(|((j, a), o)| (j, a, o)).collect();
        list.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<HashMap<(JobId, u32), OpenAttempt>, D::Error> {
        let list: Vec<(JobId, u32, OpenAttempt)> = Vec::deserialize(d)?;
        Ok(list.into_iter().map(|(j, a, o)| ((j, a), o)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ninety_seconds_at_hourly_rate_costs_one_unit() {
        let mut acct = Accountant::new();
        let job = JobId::new();
        acct.on_running("alice", AppId::new(), job, 1, NodeId::new(), 1_000);
        let rec = acct.on_end(job, 1, 91_000).unwrap();
        assert_eq!(rec.charged_seconds, 90);
        assert_eq!(price(&[rec], &Tariff { granularity_s: 3600, rate: 1.0 }), 1.0);
    }

    #[test]
    fn attempts_that_never_ran_are_not_billed() {
        let mut acct = Accountant::new();
        assert!(acct.on_end(JobId::new(), 1, 5_000).is_none());
        assert!(acct.records().is_empty());
    }

    #[test]
    fn each_retry_is_billed() {
        let mut acct = Accountant::new();
        let (job, node) = (JobId::new(), NodeId::new());
        let app = AppId::new();
        acct.on_running("u", app, job, 1, node, 0);
        acct.on_end(job, 1, 1_500);
        acct.on_running("u", app, job, 2, node, 2_000);
        acct.on_end(job, 2, 2_100);
        assert_eq!(acct.records().len(), 2);
        assert_eq!(acct.charged_by_node()[&node], 3);
        let t = Tariff { granularity_s: 1, rate: 0.5 };
        assert_eq!(price(acct.records(), &t), 1.5);
    }

    #[test]
    fn charged_seconds_rounds_up() {
        assert_eq!(charged_seconds(0, 0), 0);
        assert_eq!(charged_seconds(0, 1), 1);
        assert_eq!(charged_seconds(0, 1000), 1);
        assert_eq!(charged_seconds(0, 1001), 2);
        assert_eq!(charged_seconds(10, 5), 0);
    }

    #[test]
    fn accountant_serializes_open_attempts() {
        let mut acct = Accountant::new();
        acct.on_running("u", AppId::new(), JobId::new(), 1, NodeId::new(), 7);
        let json = serde_json::to_string(&acct).unwrap();
        let back: Accountant = serde_json::from_str(&json).unwrap();
        assert_eq!(back.open.len(), 1);
    }
}
