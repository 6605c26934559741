use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::job::{
    AppState, ApplicationRecord, ExecError, JobDescriptor, JobEvent, JobSpec, JobState, TerminalRecord,
};
use crate::directory::{LivenessState, MembershipRecord};
use crate::fabric::DynamicStats;
use crate::ids::{AppId, JobId, MessageId, NodeId, TimestampMs};
use crate::reservation::{AllocationManager, AllocationSync};
use crate::storage::FileDescriptor;
use crate::transversal::{Accountant, CloudSnapshot};

/// Window for the throughput figure.
pub const THROUGHPUT_WINDOW_MS: u64 = 5 * 60 * 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutorSlotState {
    pub node_id: NodeId,
    pub endpoint: String,
    pub slots_total: u32,
    pub slots_busy: u32,
    pub last_stats: DynamicStats,
    pub liveness: LivenessState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchDecision {
    pub job_id: JobId,
    pub node_id: NodeId,
    pub dispatch_id: MessageId,
    /// 1-based attempt number this dispatch starts.
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum ReportStatus {
    Running {
        started_at: TimestampMs,
    },
    Completed {
        #[serde(with = "crate::wire::base64_bytes")]
        result: Vec<u8>,
        #[serde(default)]
        outputs: Vec<FileDescriptor>,
        #[serde(default)]
        missing: Vec<String>,
        started_at: TimestampMs,
        ended_at: TimestampMs,
    },
    Failed {
        cause: String,
        /// `None` when the job failed before the operation started.
        started_at: Option<TimestampMs>,
        ended_at: TimestampMs,
    },
}

/// Sent by an executor for one dispatch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecReport {
    pub job_id: JobId,
    pub dispatch_id: MessageId,
    pub node_id: NodeId,
    #[serde(flatten)]
    pub status: ReportStatus,
}

/// Where an abort must be forwarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunningAt {
    pub job_id: JobId,
    pub node_id: NodeId,
    pub dispatch_id: MessageId,
}

/// Central queue, matchmaking and job state. Pure: the caller supplies time
/// and does the messaging.
#[derive(Debug, Clone, Default)]
pub struct SchedulerCore {
    apps: BTreeMap<AppId, ApplicationRecord>,
    jobs: BTreeMap<JobId, JobDescriptor>,
    queue: BTreeSet<(u64, JobId)>,
    next_enqueue: u64,
    executors: BTreeMap<NodeId, ExecutorSlotState>,
    allocations: BTreeMap<NodeId, AllocationManager>,
    alloc_version: u64,
    terminal_log: Vec<TerminalRecord>,
    terminal_seen: HashSet<JobId>,
    events: BTreeMap<AppId, Vec<JobEvent>>,
    accountant: Accountant,
    completions: VecDeque<TimestampMs>,
    lead_time_s: i64,
}

impl SchedulerCore {
    pub fn new(lead_time_s: i64) -> Self {
        Self { lead_time_s, ..Default::default() }
    }

    /// Rebuild from a snapshot. Jobs that were in flight go back to the queue;
    /// their executors' late reports no longer match and are dropped.
    pub fn restore(&mut self, snapshot: &CloudSnapshot, now: TimestampMs) {
        self.apps = snapshot.applications.iter().map(|a| (a.app_id, a.clone())).collect();
        self.terminal_log = snapshot.terminal_log.clone();
        self.terminal_seen = self.terminal_log.iter().map(|t| t.job_id).collect();
        self.accountant = snapshot.usage.clone().unwrap_or_default();
        let mut jobs: Vec<JobDescriptor> = snapshot.jobs.clone();
        jobs.sort_by_key(|j| (j.enqueue_seq, j.job_id));
        for mut job in jobs {
            if matches!(job.state, JobState::Staging | JobState::Running | JobState::Created) {
                job.state = JobState::Queued;
                job.assigned_node = None;
                job.dispatch_id = None;
            }
            if job.state == JobState::Queued {
                self.queue.insert((job.enqueue_seq, job.job_id));
            }
            self.next_enqueue = self.next_enqueue.max(job.enqueue_seq + 1);
            self.jobs.insert(job.job_id, job);
        }
        let ids: Vec<JobId> = self.jobs.keys().copied().collect();
        for id in ids {
            self.emit(id, now);
        }
    }

    pub fn create_app(&mut self, record: ApplicationRecord) {
        self.apps.insert(record.app_id, record);
    }

    pub fn app(&self, id: AppId) -> Option<&ApplicationRecord> {
        self.apps.get(&id)
    }

    pub fn apps(&self) -> impl Iterator<Item = &ApplicationRecord> {
        self.apps.values()
    }

    pub fn job(&self, id: JobId) -> Option<&JobDescriptor> {
        self.jobs.get(&id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &JobDescriptor> {
        self.jobs.values()
    }

    pub fn jobs_of(&self, app: AppId) -> Vec<JobDescriptor> {
        let mut out: Vec<JobDescriptor> = self.jobs.values().filter(|j| j.app_id == app).cloned().collect();
        out.sort_by_key(|j| (j.enqueue_seq, j.job_id));
        out
    }

    pub fn executors(&self) -> impl Iterator<Item = &ExecutorSlotState> {
        self.executors.values()
    }

    pub fn terminal_log(&self) -> &[TerminalRecord] {
        &self.terminal_log
    }

    pub fn accountant(&self) -> &Accountant {
        &self.accountant
    }

    pub fn queued_len(&self) -> usize {
        self.queue.len()
    }

    /// Queue a batch for `app`. Either every job is accepted or none is.
    pub fn submit(
        &mut self,
        app_id: AppId,
        specs: Vec<JobSpec>,
        known_operation: &dyn Fn(&str) -> bool,
        now: TimestampMs,
    ) -> Result<Vec<JobId>, ExecError> {
        let app = self.apps.get(&app_id).ok_or(ExecError::UnknownApplication(app_id))?;
        if app.state == AppState::Stopped {
            return Err(ExecError::UnknownApplication(app_id));
        }
        let model = app.model;
        for spec in &specs {
            if !known_operation(&spec.payload.operation) {
                return Err(ExecError::UnknownOperation(spec.payload.operation.clone()));
            }
            spec.staging.validate().map_err(|e| ExecError::InvalidJob(e.to_string()))?;
            if let Some(id) = spec.job_id {
                if self.jobs.contains_key(&id) {
                    return Err(ExecError::InvalidJob(format!("job {id} already exists")));
                }
            }
            if spec.max_attempts == Some(0) {
                return Err(ExecError::InvalidJob("max_attempts must be at least 1".into()));
            }
        }
        let mut ids = Vec::with_capacity(specs.len());
        for spec in specs {
            let mut job = JobDescriptor::new(app_id, model, spec.payload).with_staging(spec.staging);
            if let Some(id) = spec.job_id {
                job.job_id = id;
            }
            if let Some(max) = spec.max_attempts {
                job.max_attempts = max;
            }
            ids.push(job.job_id);
            let id = job.job_id;
            self.jobs.insert(id, job);
            self.enqueue(id, now);
        }
        let app = self.apps.get_mut(&app_id).expect("checked above");
        if ids.is_empty() {
            if app.state == AppState::Created {
                app.state = AppState::Running;
            }
            self.maybe_finish(app_id);
        } else {
            app.state = AppState::Running;
        }
        Ok(ids)
    }

    fn enqueue(&mut self, id: JobId, now: TimestampMs) {
        let seq = self.next_enqueue;
        self.next_enqueue += 1;
        let job = self.jobs.get_mut(&id).expect("job exists");
        job.transition(JobState::Queued).expect("enqueue edge");
        job.enqueue_seq = seq;
        job.assigned_node = None;
        job.dispatch_id = None;
        self.queue.insert((seq, id));
        self.emit(id, now);
    }

    fn emit(&mut self, id: JobId, now: TimestampMs) {
        let job = self.jobs.get_mut(&id).expect("job exists");
        job.event_seq += 1;
        let event = JobEvent {
            app_id: job.app_id,
            job_id: id,
            seq: job.event_seq,
            state: job.state,
            at: now,
            result: if job.state == JobState::Completed { job.result.clone() } else { None },
            failure_cause: if job.state.is_terminal() { job.failure_cause.clone() } else { None },
            outputs: job.outputs.clone(),
        };
        self.events.entry(job.app_id).or_default().push(event);
    }

    /// Events for `app` from position `cursor` on, and the next cursor.
    pub fn events_since(&self, app: AppId, cursor: usize) -> (Vec<JobEvent>, usize) {
        let all = self.events.get(&app).map(Vec::as_slice).unwrap_or(&[]);
        let from = cursor.min(all.len());
        (all[from..].to_vec(), all.len())
    }

    /// Reconcile the executor table with the catalogue's executor records.
    /// Executors that vanished or died lose their jobs.
    pub fn sync_executors(&mut self, records: &[MembershipRecord], now: TimestampMs) -> Vec<JobId> {
        let mut seen = HashSet::new();
        for r in records.iter().filter(|r| r.hosts("executor") && r.state != LivenessState::Dead) {
            seen.insert(r.node_id);
            let entry = self.executors.entry(r.node_id).or_insert_with(|| ExecutorSlotState {
                node_id: r.node_id,
                endpoint: r.endpoint.clone(),
                slots_total: 1,
                slots_busy: 0,
                last_stats: DynamicStats::default(),
                liveness: r.state,
            });
            entry.endpoint = r.endpoint.clone();
            entry.slots_total = r.executor_slots.max(1);
            entry.last_stats = r.last_stats.clone();
            entry.liveness = r.state;
        }
        let lost: Vec<NodeId> = self.executors.keys().filter(|n| !seen.contains(n)).copied().collect();
        let mut affected = Vec::new();
        for node in lost {
            affected.extend(self.node_lost(node, now));
        }
        affected
    }

    /// Fail every in-flight job on `node` with cause `NodeLost`.
    pub fn node_lost(&mut self, node: NodeId, now: TimestampMs) -> Vec<JobId> {
        self.executors.remove(&node);
        let victims: Vec<JobId> = self
            .jobs
            .values()
            .filter(|j| j.assigned_node == Some(node) && matches!(j.state, JobState::Staging | JobState::Running))
            .map(|j| j.job_id)
            .collect();
        for id in &victims {
            tracing::warn!(job = %id, %node, "node lost");
            let job = &self.jobs[id];
            if job.state == JobState::Running {
                self.accountant.on_end(*id, job.attempts + 1, now);
            }
            self.fail(*id, "NodeLost".into(), now);
        }
        victims
    }

    pub fn set_allocations(&mut self, sync: AllocationSync) -> bool {
        if sync.version < self.alloc_version {
            return false;
        }
        self.alloc_version = sync.version;
        self.allocations.clear();
        for (node, windows) in sync.windows {
            let mut m = AllocationManager::new();
            m.sync(windows);
            self.allocations.insert(node, m);
        }
        true
    }

    fn allowed(&self, node: NodeId, app: AppId, now_s: i64) -> bool {
        self.allocations.get(&node).map_or(true, |m| m.dispatch_allowed(app, now_s, self.lead_time_s))
    }

    /// Fill free executor slots. Reserved nodes serve their owner's jobs
    /// first; everything else goes FIFO (lowest job id among equals) to the
    /// least-loaded eligible node.
    pub fn schedule(&mut self, now: TimestampMs) -> Vec<DispatchDecision> {
        let now_s = (now / 1000) as i64;
        let mut decisions = Vec::new();

        let reserved: Vec<(NodeId, AppId)> = self
            .executors
            .keys()
            .filter_map(|n| {
                let w = self.allocations.get(n)?.active_at(now_s)?;
                Some((*n, w.bound_app?))
            })
            .collect();
        for (node, owner) in reserved {
            let owned: Vec<JobId> = self
                .queue
                .iter()
                .map(|(_, id)| *id)
                .filter(|id| self.jobs[id].app_id == owner)
                .collect();
            for id in owned {
                if !self.has_free_slot(node) {
                    break;
                }
                decisions.push(self.assign(id, node, now));
            }
        }

        let pending: Vec<JobId> = self.queue.iter().map(|(_, id)| *id).collect();
        for id in pending {
            if !self.executors.values().any(|e| Self::free(e)) {
                break;
            }
            let app = self.jobs[&id].app_id;
            let best = self
                .executors
                .values()
                .filter(|e| Self::free(e) && self.allowed(e.node_id, app, now_s))
                .min_by(|a, b| {
                    a.slots_busy
                        .cmp(&b.slots_busy)
                        .then(a.last_stats.cpu_usage_percent.total_cmp(&b.last_stats.cpu_usage_percent))
                        .then(a.node_id.cmp(&b.node_id))
                })
                .map(|e| e.node_id);
            if let Some(node) = best {
                decisions.push(self.assign(id, node, now));
            }
        }
        decisions
    }

    fn free(e: &ExecutorSlotState) -> bool {
        e.liveness == LivenessState::Alive && e.slots_busy < e.slots_total
    }

    fn has_free_slot(&self, node: NodeId) -> bool {
        self.executors.get(&node).is_some_and(Self::free)
    }

    fn assign(&mut self, id: JobId, node: NodeId, _now: TimestampMs) -> DispatchDecision {
        let job = self.jobs.get_mut(&id).expect("queued job exists");
        self.queue.remove(&(job.enqueue_seq, id));
        job.transition(JobState::Staging).expect("queued job can stage");
        let dispatch_id = MessageId::new();
        job.assigned_node = Some(node);
        job.dispatch_id = Some(dispatch_id);
        let ex = self.executors.get_mut(&node).expect("executor exists");
        ex.slots_busy += 1;
        debug_assert!(ex.slots_busy <= ex.slots_total);
        DispatchDecision { job_id: id, node_id: node, dispatch_id, attempt: job.attempts + 1 }
    }

    fn release_slot(&mut self, node: Option<NodeId>) {
        if let Some(ex) = node.and_then(|n| self.executors.get_mut(&n)) {
            ex.slots_busy = ex.slots_busy.saturating_sub(1);
        }
    }

    /// The executor would not take the job; put it back without charging an
    /// attempt.
    pub fn dispatch_refused(&mut self, id: JobId, dispatch_id: MessageId, now: TimestampMs) -> bool {
        let Some(job) = self.jobs.get(&id) else { return false };
        if job.dispatch_id != Some(dispatch_id) || job.state != JobState::Staging {
            return false;
        }
        let node = job.assigned_node;
        self.release_slot(node);
        let seq = self.next_enqueue;
        self.next_enqueue += 1;
        let job = self.jobs.get_mut(&id).expect("exists");
        job.transition(JobState::Queued).expect("staging -> queued");
        job.enqueue_seq = seq;
        job.assigned_node = None;
        job.dispatch_id = None;
        self.queue.insert((seq, id));
        self.emit(id, now);
        true
    }

    /// Apply an executor report. Returns whether it changed anything;
    /// reports for an older dispatch or a finished job are dropped.
    pub fn report(&mut self, report: &ExecReport, now: TimestampMs) -> Result<bool, ExecError> {
        let job = self.jobs.get(&report.job_id).ok_or(ExecError::UnknownJob(report.job_id))?;
        if job.dispatch_id != Some(report.dispatch_id) || job.state.is_terminal() {
            return Ok(false);
        }
        let id = report.job_id;
        let attempt = job.attempts + 1;
        let owner = self.apps.get(&job.app_id).map(|a| a.owner().to_string()).unwrap_or_default();
        let (app_id, node) = (job.app_id, report.node_id);
        match &report.status {
            ReportStatus::Running { started_at } => {
                if job.state != JobState::Staging {
                    return Ok(false);
                }
                self.start_running(id, &owner, app_id, attempt, node, *started_at, now)?;
            }
            ReportStatus::Completed { result, outputs, missing, started_at, ended_at } => {
                if job.state == JobState::Staging {
                    self.start_running(id, &owner, app_id, attempt, node, *started_at, now)?;
                }
                self.accountant.on_end(id, attempt, *ended_at);
                let node = self.jobs[&id].assigned_node;
                self.release_slot(node);
                let job = self.jobs.get_mut(&id).expect("exists");
                job.transition(JobState::Completed)?;
                job.result = Some(result.clone());
                job.outputs = outputs.clone();
                job.missing_outputs = missing.clone();
                job.failure_cause = None;
                job.dispatch_id = None;
                self.terminal(id, now);
            }
            ReportStatus::Failed { cause, started_at, ended_at } => {
                if let (JobState::Staging, Some(s)) = (job.state, started_at) {
                    self.start_running(id, &owner, app_id, attempt, node, *s, now)?;
                }
                self.accountant.on_end(id, attempt, *ended_at);
                self.fail(id, cause.clone(), now);
            }
        }
        Ok(true)
    }

    #[allow(clippy::too_many_arguments)]
    fn start_running(
        &mut self,
        id: JobId,
        owner: &str,
        app: AppId,
        attempt: u32,
        node: NodeId,
        started_at: TimestampMs,
        now: TimestampMs,
    ) -> Result<(), ExecError> {
        self.jobs.get_mut(&id).expect("exists").transition(JobState::Running)?;
        self.accountant.on_running(owner, app, id, attempt, node, started_at);
        self.emit(id, now);
        Ok(())
    }

    /// Count a failed attempt; requeue while attempts remain.
    fn fail(&mut self, id: JobId, cause: String, now: TimestampMs) {
        let node = self.jobs[&id].assigned_node;
        self.release_slot(node);
        let job = self.jobs.get_mut(&id).expect("exists");
        job.transition(JobState::Failed).expect("in-flight job can fail");
        job.attempts += 1;
        job.failure_cause = Some(cause);
        job.dispatch_id = None;
        if job.attempts < job.max_attempts {
            self.enqueue(id, now);
        } else {
            self.terminal(id, now);
        }
    }

    fn terminal(&mut self, id: JobId, now: TimestampMs) {
        let job = &self.jobs[&id];
        if self.terminal_seen.insert(id) {
            self.terminal_log.push(TerminalRecord { job_id: id, app_id: job.app_id, state: job.state, at: now });
            self.completions.push_back(now);
        }
        let app = job.app_id;
        self.emit(id, now);
        self.maybe_finish(app);
    }

    fn maybe_finish(&mut self, app_id: AppId) {
        let done = self.jobs.values().filter(|j| j.app_id == app_id).all(|j| j.state.is_terminal());
        if let Some(app) = self.apps.get_mut(&app_id) {
            if done && app.state == AppState::Running {
                app.state = AppState::Finished;
            }
        }
    }

    /// Abort a non-terminal job. Returns where it was running, if anywhere.
    pub fn abort(&mut self, id: JobId, now: TimestampMs) -> Result<Option<RunningAt>, ExecError> {
        let job = self.jobs.get(&id).ok_or(ExecError::UnknownJob(id))?;
        if !job.state.can_become(JobState::Aborted, job.attempts, job.max_attempts) {
            return Err(ExecError::IllegalTransition { job: id, from: job.state, to: JobState::Aborted });
        }
        let running = match (job.state, job.assigned_node, job.dispatch_id) {
            (JobState::Staging | JobState::Running, Some(node_id), Some(dispatch_id)) => {
                Some(RunningAt { job_id: id, node_id, dispatch_id })
            }
            _ => None,
        };
        if job.state == JobState::Queued {
            self.queue.remove(&(job.enqueue_seq, id));
        }
        if job.state == JobState::Running {
            self.accountant.on_end(id, job.attempts + 1, now);
        }
        if running.is_some() {
            self.release_slot(running.map(|r| r.node_id));
        }
        let job = self.jobs.get_mut(&id).expect("exists");
        job.transition(JobState::Aborted)?;
        job.dispatch_id = None;
        job.failure_cause = Some("Aborted".into());
        self.terminal(id, now);
        Ok(running)
    }

    /// Abort everything outstanding and mark the application stopped.
    pub fn stop_app(&mut self, app_id: AppId, now: TimestampMs) -> Result<Vec<RunningAt>, ExecError> {
        if !self.apps.contains_key(&app_id) {
            return Err(ExecError::UnknownApplication(app_id));
        }
        let live: Vec<JobId> = self
            .jobs
            .values()
            .filter(|j| j.app_id == app_id && !j.state.is_terminal())
            .map(|j| j.job_id)
            .collect();
        let mut running = Vec::new();
        for id in live {
            if let Some(r) = self.abort(id, now)? {
                running.push(r);
            }
        }
        self.apps.get_mut(&app_id).expect("checked").state = AppState::Stopped;
        Ok(running)
    }

    pub fn counts_by_state(&self) -> BTreeMap<JobState, usize> {
        let mut out: BTreeMap<JobState, usize> = JobState::ALL.iter().map(|s| (*s, 0)).collect();
        for j in self.jobs.values() {
            *out.entry(j.state).or_default() += 1;
        }
        out
    }

    /// Terminal jobs per minute over the last five minutes.
    pub fn throughput_per_min(&mut self, now: TimestampMs) -> f64 {
        while self.completions.front().is_some_and(|t| now.saturating_sub(*t) > THROUGHPUT_WINDOW_MS) {
            self.completions.pop_front();
        }
        self.completions.len() as f64 / 5.0
    }

    /// Conservation, slot bounds and single terminal records.
    pub fn check_invariants(&self) -> Result<(), String> {
        let counts = self.counts_by_state();
        let total: usize = counts.values().sum();
        if total != self.jobs.len() {
            return Err("job counts do not add up".into());
        }
        if counts[&JobState::Queued] != self.queue.len() {
            return Err(format!("{} queued jobs but queue holds {}", counts[&JobState::Queued], self.queue.len()));
        }
        for e in self.executors.values() {
            if e.slots_busy > e.slots_total {
                return Err(format!("executor {} oversubscribed", e.node_id));
            }
            let in_flight = self
                .jobs
                .values()
                .filter(|j| j.assigned_node == Some(e.node_id) && matches!(j.state, JobState::Staging | JobState::Running))
                .count();
            if in_flight as u32 != e.slots_busy {
                return Err(format!("executor {} busy {} but {} jobs in flight", e.node_id, e.slots_busy, in_flight));
            }
        }
        let mut seen = HashSet::new();
        for t in &self.terminal_log {
            if !seen.insert(t.job_id) {
                return Err(format!("job {} has two terminal records", t.job_id));
            }
        }
        let terminal = self.jobs.values().filter(|j| j.state.is_terminal()).count();
        if terminal != self.terminal_log.len() {
            return Err(format!("{terminal} terminal jobs but {} terminal records", self.terminal_log.len()));
        }
        Ok(())
    }

    /// Copy the scheduler's part of the cloud state into `snapshot`.
    pub fn export(&self, snapshot: &mut CloudSnapshot) {
        snapshot.applications = self.apps.values().cloned().collect();
        snapshot.jobs = self.jobs.values().cloned().collect();
        snapshot.terminal_log = self.terminal_log.clone();
        snapshot.usage = Some(self.accountant.clone());
    }
}
