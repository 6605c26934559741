use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::executor::{DispatchRequest, ExecAbort, KIND_DISPATCH, KIND_EXEC_ABORT};
use super::job::{AppState, ApplicationRecord, ExecError, JobDescriptor, JobEvent, JobSpec, JobState, Model};
use super::scheduler::{DispatchDecision, ExecReport, ExecutorSlotState, RunningAt, SchedulerCore};
use crate::container::{
    decode, encode, unknown_kind, Environment, Reply, Service, ServiceContext, ServiceEntry, ServiceResult,
};
use crate::directory::query_catalogue;
use crate::ids::{now_ms, AppId, JobId, MessageId, NodeId};
use crate::reservation::{AllocationSync, KIND_ALLOC_SYNC};
use crate::storage::{DataChannelSpec, FileDescriptor};
use crate::transversal::{price, Action, Credentials, Principal, Role, Tariff, UsageRecord};
use crate::wire::{ServiceEnvelope, WireError};

pub const KIND_APP_CREATE: &str = "exec.app.create";
pub const KIND_APP_GET: &str = "exec.app.get";
pub const KIND_APP_STOP: &str = "exec.app.stop";
pub const KIND_SUBMIT: &str = "exec.submit";
pub const KIND_REPORT: &str = "exec.report";
pub const KIND_ABORT: &str = "exec.abort";
pub const KIND_EVENTS: &str = "exec.events";
pub const KIND_JOB: &str = "exec.job";
pub const KIND_STATS: &str = "exec.stats";
pub const KIND_USAGE: &str = "exec.usage";
const KIND_TICK: &str = "exec.tick";
const KIND_DISPATCH_FAILED: &str = "exec.dispatch_failed";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateApp {
    pub credentials: Credentials,
    pub model: Model,
    #[serde(default)]
    pub display_name: String,
    #[serde(default)]
    pub channels: Vec<DataChannelSpec>,
    #[serde(default)]
    pub shared_inputs: Vec<FileDescriptor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AppRef {
    pub credentials: Credentials,
    pub app_id: AppId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmitJobs {
    pub credentials: Credentials,
    pub app_id: AppId,
    pub jobs: Vec<JobSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitAck {
    pub job_ids: Vec<JobId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbortJob {
    pub credentials: Credentials,
    pub job_id: JobId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventsRequest {
    pub app_id: AppId,
    pub cursor: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventsPage {
    pub events: Vec<JobEvent>,
    pub cursor: usize,
    pub app_state: AppState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplicationView {
    pub application: ApplicationRecord,
    pub jobs: Vec<JobDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerStats {
    pub jobs_by_state: std::collections::BTreeMap<JobState, usize>,
    pub executors: Vec<ExecutorSlotState>,
    pub throughput_per_min: f64,
    pub applications: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    pub records: Vec<UsageRecord>,
    pub charged_by_node: std::collections::BTreeMap<NodeId, u64>,
    pub tariff: Tariff,
    pub price: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DispatchFailed {
    job_id: JobId,
    dispatch_id: MessageId,
    reason: String,
}

/// The master's job queue and dispatcher.
pub struct SchedulerService {
    core: SchedulerCore,
    env: Arc<Environment>,
    tick: Duration,
}

impl SchedulerService {
    /// Options: `tick_ms` (200), `lead_time_s` (30).
    pub fn from_entry(entry: &ServiceEntry, env: &Arc<Environment>) -> Result<Self, String> {
        let mut core = SchedulerCore::new(entry.opt_u64("lead_time_s").unwrap_or(30) as i64);
        if let Some(snapshot) = &env.restored {
            core.restore(snapshot, now_ms());
            tracing::info!(jobs = core.jobs().count(), queued = core.queued_len(), "scheduler state restored");
        }
        Ok(Self { core, env: env.clone(), tick: Duration::from_millis(entry.opt_u64("tick_ms").unwrap_or(200)) })
    }

    pub fn core(&self) -> &SchedulerCore {
        &self.core
    }

    fn principal(&self, credentials: &Credentials, action: Action, resource: &str) -> Result<Principal, WireError> {
        self.env.security.check(credentials, action, resource).map_err(|_| ExecError::Unauthorized.into())
    }

    fn owned_app(&self, principal: &Principal, app_id: AppId) -> Result<&ApplicationRecord, WireError> {
        let app = self.core.app(app_id).ok_or(ExecError::UnknownApplication(app_id))?;
        if app.owner() != principal.user_id && !principal.roles.contains(&Role::Admin) {
            return Err(ExecError::Unauthorized.into());
        }
        Ok(app)
    }

    fn publish(&self) {
        self.env.hub.update(|s| self.core.export(s));
    }

    fn persist(&self) {
        self.publish();
        if let Err(e) = self.env.hub.persist_now() {
            tracing::warn!(error = %e, "scheduler snapshot failed");
        }
    }

    /// Run a scheduling pass and send the resulting dispatches.
    fn schedule_and_dispatch(&mut self, ctx: &ServiceContext) {
        let decisions = self.core.schedule(now_ms());
        for d in decisions {
            self.send_dispatch(ctx, d);
        }
    }

    fn send_dispatch(&self, ctx: &ServiceContext, d: DispatchDecision) {
        let Some(job) = self.core.job(d.job_id).cloned() else { return };
        let Some(app) = self.core.app(job.app_id) else { return };
        let req = DispatchRequest {
            job,
            dispatch_id: d.dispatch_id,
            attempt: d.attempt,
            scheduler_endpoint: ctx.endpoint().to_string(),
            credentials: app.credentials.clone(),
            channels: app.channels.clone(),
        };
        tracing::debug!(job = %d.job_id, node = %d.node_id, attempt = d.attempt, "dispatch");
        let ctx2 = ctx.clone();
        ctx.spawn(async move {
            if let Err(e) = ctx2.call_node(d.node_id, "executor", KIND_DISPATCH, encode(&req)).await {
                let failed = DispatchFailed { job_id: d.job_id, dispatch_id: d.dispatch_id, reason: e.to_string() };
                let _ = ctx2.call_local("scheduler", KIND_DISPATCH_FAILED, encode(&failed)).await;
            }
        });
    }

    fn forward_aborts(&self, ctx: &ServiceContext, running: Vec<RunningAt>) {
        for r in running {
            let ctx2 = ctx.clone();
            ctx.spawn(async move {
                let msg = ExecAbort { job_id: r.job_id, dispatch_id: r.dispatch_id };
                let _ = ctx2.call_node(r.node_id, "executor", KIND_EXEC_ABORT, encode(&msg)).await;
            });
        }
    }

    async fn on_tick(&mut self, ctx: &ServiceContext) -> Result<(), WireError> {
        match query_catalogue(&ctx.container(), Some("executor")).await {
            Ok(records) => {
                let lost = self.core.sync_executors(&records, now_ms());
                if !lost.is_empty() {
                    self.persist();
                }
            }
            Err(e) => tracing::debug!(error = %e, "catalogue query failed"),
        }
        self.schedule_and_dispatch(ctx);
        Ok(())
    }
}

#[async_trait]
impl Service for SchedulerService {
    async fn start(&mut self, ctx: &ServiceContext) -> Result<(), WireError> {
        if self.env.restored.is_some() {
            self.publish();
        }
        ctx.every(self.tick, KIND_TICK);
        Ok(())
    }

    async fn handle(&mut self, ctx: &ServiceContext, request: ServiceEnvelope) -> ServiceResult {
        match request.kind.as_str() {
            KIND_APP_CREATE => {
                let msg: CreateApp = decode(&request.payload)?;
                self.principal(&msg.credentials, Action::Submit, "applications")?;
                for c in &msg.channels {
                    if !self.env.channels.has_scheme(&c.scheme) {
                        return Err(WireError::new("UnknownScheme", c.scheme.clone()));
                    }
                }
                let record = ApplicationRecord {
                    app_id: AppId::new(),
                    model: msg.model,
                    display_name: msg.display_name,
                    credentials: msg.credentials,
                    channels: msg.channels,
                    shared_inputs: msg.shared_inputs,
                    state: AppState::Created,
                    created_at: now_ms(),
                };
                self.core.create_app(record.clone());
                self.persist();
                let mut shown = record;
                shown.credentials.token.clear();
                Ok(Reply::json("exec.app", &shown))
            }
            KIND_APP_GET => {
                let msg: AppRef = decode(&request.payload)?;
                let app = self.core.app(msg.app_id).ok_or(ExecError::UnknownApplication(msg.app_id))?;
                let mut application = app.clone();
                application.credentials.token.clear();
                let view = ApplicationView { application, jobs: self.core.jobs_of(msg.app_id) };
                Ok(Reply::json("exec.app.view", &view))
            }
            KIND_APP_STOP => {
                let msg: AppRef = decode(&request.payload)?;
                let principal = self.principal(&msg.credentials, Action::Submit, "applications")?;
                self.owned_app(&principal, msg.app_id)?;
                let running = self.core.stop_app(msg.app_id, now_ms())?;
                self.persist();
                self.forward_aborts(ctx, running);
                Ok(Reply::ack())
            }
            KIND_SUBMIT => {
                let msg: SubmitJobs = decode(&request.payload)?;
                let principal = self.principal(&msg.credentials, Action::Submit, "jobs")?;
                self.owned_app(&principal, msg.app_id)?;
                let ops = self.env.operations.clone();
                let job_ids = self.core.submit(msg.app_id, msg.jobs, &|op| ops.contains(op), now_ms())?;
                // durable before the ack
                self.persist();
                self.schedule_and_dispatch(ctx);
                Ok(Reply::json("exec.submitted", &SubmitAck { job_ids }))
            }
            KIND_REPORT => {
                let report: ExecReport = decode(&request.payload)?;
                let before = self.core.job(report.job_id).map(|j| j.state);
                let applied = self.core.report(&report, now_ms())?;
                if applied {
                    let after = self.core.job(report.job_id).map(|j| j.state);
                    if after.is_some_and(|s| s.is_terminal()) || after == Some(JobState::Queued) && before != after {
                        self.persist();
                    } else {
                        self.publish();
                    }
                    self.schedule_and_dispatch(ctx);
                }
                Ok(Reply::ack())
            }
            KIND_DISPATCH_FAILED => {
                let msg: DispatchFailed = decode(&request.payload)?;
                if self.core.dispatch_refused(msg.job_id, msg.dispatch_id, now_ms()) {
                    tracing::debug!(job = %msg.job_id, reason = %msg.reason, "dispatch refused, requeued");
                    self.publish();
                }
                Ok(Reply::ack())
            }
            KIND_ABORT => {
                let msg: AbortJob = decode(&request.payload)?;
                let principal = self.principal(&msg.credentials, Action::Submit, "jobs")?;
                let app_id = self.core.job(msg.job_id).ok_or(ExecError::UnknownJob(msg.job_id))?.app_id;
                self.owned_app(&principal, app_id)?;
                let running = self.core.abort(msg.job_id, now_ms())?;
                self.persist();
                self.forward_aborts(ctx, running.into_iter().collect());
                self.schedule_and_dispatch(ctx);
                Ok(Reply::ack())
            }
            KIND_EVENTS => {
                let msg: EventsRequest = decode(&request.payload)?;
                let app = self.core.app(msg.app_id).ok_or(ExecError::UnknownApplication(msg.app_id))?;
                let app_state = app.state;
                let (events, cursor) = self.core.events_since(msg.app_id, msg.cursor);
                Ok(Reply::json("exec.events", &EventsPage { events, cursor, app_state }))
            }
            KIND_JOB => {
                let id: JobId = decode(&request.payload)?;
                let job = self.core.job(id).ok_or(ExecError::UnknownJob(id))?;
                Ok(Reply::json("exec.job", job))
            }
            KIND_STATS => {
                let stats = SchedulerStats {
                    jobs_by_state: self.core.counts_by_state(),
                    executors: self.core.executors().cloned().collect(),
                    throughput_per_min: self.core.throughput_per_min(now_ms()),
                    applications: self.core.apps().count(),
                };
                Ok(Reply::json("exec.stats", &stats))
            }
            KIND_USAGE => {
                let records = self.core.accountant().records().to_vec();
                let tariff = self.env.config.tariff.clone();
                let report = UsageReport {
                    price: price(&records, &tariff),
                    charged_by_node: self.core.accountant().charged_by_node(),
                    records,
                    tariff,
                };
                Ok(Reply::json("exec.usage", &report))
            }
            KIND_ALLOC_SYNC => {
                let sync: AllocationSync = decode(&request.payload)?;
                self.core.set_allocations(sync);
                Ok(Reply::ack())
            }
            KIND_TICK => {
                self.on_tick(ctx).await?;
                Ok(Reply::ack())
            }
            _ => Err(unknown_kind(&request)),
        }
    }

    async fn stop(&mut self, _ctx: &ServiceContext) {
        self.persist();
    }
}
