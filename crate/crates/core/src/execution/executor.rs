use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::time::Instant;

use super::job::JobDescriptor;
use super::ops::OpContext;
use super::scheduler::{ExecReport, ReportStatus};
use crate::container::{
    decode, encode, unknown_kind, Container, Environment, Reply, Service, ServiceContext, ServiceEntry,
    ServiceResult,
};
use crate::fabric::StaticProfile;
use crate::ids::{now_ms, now_secs, JobId, MessageId};
use crate::reservation::{Admission, AllocationManager, AllocationSync, KIND_ALLOC_SYNC};
use crate::storage::{stage_in, stage_out, DataChannelSpec, StageOutReport};
use crate::transversal::Credentials;
use crate::wire::{ServiceEnvelope, WireError};

pub const KIND_DISPATCH: &str = "exec.dispatch";
pub const KIND_EXEC_ABORT: &str = "exec.abort";
pub const KIND_EXEC_STATUS: &str = "exec.status";

/// How long an executor keeps retrying a report before giving up.
const REPORT_PATIENCE: Duration = Duration::from_secs(60);

/// Slots an executor offers: the `slots` option, else the CPU count.
pub fn executor_slots(entry: Option<&ServiceEntry>, profile: &StaticProfile) -> u32 {
    entry.and_then(|e| e.opt_u64("slots")).map(|s| s as u32).unwrap_or(profile.cpu_count).max(1)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DispatchRequest {
    pub job: JobDescriptor,
    pub dispatch_id: MessageId,
    pub attempt: u32,
    /// Where reports go.
    pub scheduler_endpoint: String,
    pub credentials: Credentials,
    #[serde(default)]
    pub channels: Vec<DataChannelSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecAbort {
    pub job_id: JobId,
    pub dispatch_id: MessageId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutorStatus {
    pub slots_total: u32,
    pub slots_busy: u32,
    pub running: Vec<JobId>,
    pub accepted: u64,
    pub refused: u64,
    /// Highest concurrent job count seen.
    pub peak_busy: u32,
}

struct RunningJob {
    dispatch_id: MessageId,
    cancel: Arc<AtomicBool>,
}

#[derive(Default)]
struct Counters {
    accepted: AtomicU64,
    refused: AtomicU64,
    peak: AtomicU64,
}

/// Runs dispatched jobs in per-job workspaces, one per slot.
pub struct ExecutorService {
    slots: u32,
    running: Arc<Mutex<HashMap<JobId, RunningJob>>>,
    allocations: AllocationManager,
    alloc_version: u64,
    work_dir: PathBuf,
    retain_workspace: bool,
    wall_limit: Option<Duration>,
    counters: Arc<Counters>,
    env: Arc<Environment>,
}

impl ExecutorService {
    /// Options: `slots`, `work_dir`, `retain_workspace`, `job_wall_limit_ms`.
    pub fn from_entry(entry: &ServiceEntry, env: &Arc<Environment>) -> Result<Self, String> {
        let work_dir = entry
            .opt_str("work_dir")
            .map(PathBuf::from)
            .or_else(|| env.config.work_dir.clone())
            .unwrap_or_else(|| std::env::temp_dir().join(format!("cirrus-{}", env.config.node_id)))
            .join("jobs");
        std::fs::create_dir_all(&work_dir).map_err(|e| format!("cannot create {}: {e}", work_dir.display()))?;
        Ok(Self {
            slots: executor_slots(Some(entry), env.sampler.profile()),
            running: Arc::new(Mutex::new(HashMap::new())),
            allocations: AllocationManager::new(),
            alloc_version: 0,
            work_dir,
            retain_workspace: entry.opt_bool("retain_workspace").unwrap_or(false),
            wall_limit: entry.opt_u64("job_wall_limit_ms").filter(|&ms| ms > 0).map(Duration::from_millis),
            counters: Arc::new(Counters::default()),
            env: env.clone(),
        })
    }

    fn status(&self) -> ExecutorStatus {
        let running = self.running.lock().expect("running poisoned");
        let mut ids: Vec<JobId> = running.keys().copied().collect();
        ids.sort();
        ExecutorStatus {
            slots_total: self.slots,
            slots_busy: running.len() as u32,
            running: ids,
            accepted: self.counters.accepted.load(Ordering::SeqCst),
            refused: self.counters.refused.load(Ordering::SeqCst),
            peak_busy: self.counters.peak.load(Ordering::SeqCst) as u32,
        }
    }

    fn refuse(&self, code: &str, message: String) -> WireError {
        self.counters.refused.fetch_add(1, Ordering::SeqCst);
        WireError::new(code, message)
    }

    fn accept(&mut self, ctx: &ServiceContext, req: DispatchRequest) -> ServiceResult {
        let authenticated = self.env.security.authenticate(&req.credentials).is_ok();
        if let Admission::Refuse(reason) = self.allocations.admissible(req.job.app_id, authenticated, now_secs()) {
            return Err(self.refuse("Refused", serde_json::to_string(&reason).unwrap_or_default()));
        }
        let cancel = Arc::new(AtomicBool::new(false));
        {
            let mut running = self.running.lock().expect("running poisoned");
            if running.contains_key(&req.job.job_id) {
                return Err(self.refuse("AlreadyRunning", req.job.job_id.to_string()));
            }
            if running.len() as u32 >= self.slots {
                return Err(self.refuse("NoFreeSlot", format!("{} of {} slots busy", running.len(), self.slots)));
            }
            running.insert(req.job.job_id, RunningJob { dispatch_id: req.dispatch_id, cancel: cancel.clone() });
            assert!(running.len() as u32 <= self.slots, "slot oversubscription");
            self.counters.peak.fetch_max(running.len() as u64, Ordering::SeqCst);
        }
        self.counters.accepted.fetch_add(1, Ordering::SeqCst);
        let runner = JobRunner {
            container: ctx.container(),
            env: self.env.clone(),
            running: self.running.clone(),
            workspace: self.work_dir.join(format!("{}-{}", req.job.job_id, req.dispatch_id)),
            retain: self.retain_workspace,
            wall_limit: self.wall_limit,
            cancel,
            req,
        };
        ctx.spawn(runner.run());
        Ok(Reply::ack())
    }
}

#[async_trait]
impl Service for ExecutorService {
    async fn handle(&mut self, ctx: &ServiceContext, request: ServiceEnvelope) -> ServiceResult {
        match request.kind.as_str() {
            KIND_DISPATCH => {
                let req: DispatchRequest = decode(&request.payload)?;
                self.accept(ctx, req)
            }
            KIND_EXEC_ABORT => {
                let abort: ExecAbort = decode(&request.payload)?;
                let running = self.running.lock().expect("running poisoned");
                if let Some(job) = running.get(&abort.job_id).filter(|j| j.dispatch_id == abort.dispatch_id) {
                    job.cancel.store(true, Ordering::SeqCst);
                }
                Ok(Reply::ack())
            }
            KIND_ALLOC_SYNC => {
                let sync: AllocationSync = decode(&request.payload)?;
                if sync.version >= self.alloc_version {
                    self.alloc_version = sync.version;
                    self.allocations.sync(sync.windows.get(&ctx.node_id()).cloned().unwrap_or_default());
                }
                Ok(Reply::ack())
            }
            KIND_EXEC_STATUS => Ok(Reply::json("exec.status", &self.status())),
            _ => Err(unknown_kind(&request)),
        }
    }

    async fn drain(&mut self, _ctx: &ServiceContext, deadline: Instant) -> Result<(), WireError> {
        loop {
            if self.running.lock().expect("running poisoned").is_empty() {
                return Ok(());
            }
            if Instant::now() >= deadline {
                return Err(WireError::new("DrainTimeout", "jobs still running"));
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    }

    async fn stop(&mut self, _ctx: &ServiceContext) {
        for job in self.running.lock().expect("running poisoned").values() {
            job.cancel.store(true, Ordering::SeqCst);
        }
    }
}

struct JobRunner {
    container: Container,
    env: Arc<Environment>,
    running: Arc<Mutex<HashMap<JobId, RunningJob>>>,
    workspace: PathBuf,
    retain: bool,
    wall_limit: Option<Duration>,
    cancel: Arc<AtomicBool>,
    req: DispatchRequest,
}

enum Finish {
    Done { result: Vec<u8>, report: StageOutReport, started_at: u64 },
    Failed { cause: String, started_at: Option<u64> },
    /// Aborted by the scheduler, which already recorded the outcome.
    Aborted,
}

impl JobRunner {
    async fn run(self) {
        let job_id = self.req.job.job_id;
        let (finish, running_report) = self.execute().await;
        let ended_at = now_ms();
        if !self.retain {
            let _ = std::fs::remove_dir_all(&self.workspace);
        }
        self.running.lock().expect("running poisoned").remove(&job_id);
        if let Some(handle) = running_report {
            let _ = handle.await;
        }
        let status = match finish {
            Finish::Aborted => return,
            Finish::Done { result, report, started_at } => ReportStatus::Completed {
                result,
                outputs: report.uploaded,
                missing: report.missing,
                started_at,
                ended_at,
            },
            Finish::Failed { cause, started_at } => ReportStatus::Failed { cause, started_at, ended_at },
        };
        send_report(&self.container, &self.req, status).await;
    }

    async fn execute(&self) -> (Finish, Option<tokio::task::JoinHandle<()>>) {
        let job = &self.req.job;
        if let Err(e) = std::fs::create_dir_all(&self.workspace) {
            return (Finish::Failed { cause: format!("StageFailure: workspace: {e}"), started_at: None }, None);
        }
        let plan = job.staging.clone();
        let (ws, channels) = (self.workspace.clone(), self.env.channels.clone());
        let staged = tokio::task::spawn_blocking(move || stage_in(&plan, &ws, &channels)).await;
        match staged {
            Ok(Ok(())) => {}
            Ok(Err(f)) => return (Finish::Failed { cause: format!("StageFailure: {f}"), started_at: None }, None),
            Err(e) => return (Finish::Failed { cause: format!("StageFailure: {e}"), started_at: None }, None),
        }

        let started_at = now_ms();
        let running_report = {
            let (c, r) = (self.container.clone(), self.req.clone());
            tokio::spawn(async move { send_report(&c, &r, ReportStatus::Running { started_at }).await })
        };

        let Some(op) = self.env.operations.get(&job.payload.operation) else {
            let cause = format!("OperationError: unknown operation {}", job.payload.operation);
            return (Finish::Failed { cause, started_at: Some(started_at) }, Some(running_report));
        };
        let mut op_ctx = OpContext::new(self.workspace.clone(), self.env.channels.clone()).with_cancel(self.cancel.clone());
        op_ctx.app_id = job.app_id;
        op_ctx.job_id = job.job_id;
        op_ctx.node_id = self.container.node_id();
        op_ctx.app_channels = self.req.channels.clone();
        let params = job.payload.params.clone();
        let call = tokio::task::spawn_blocking(move || op(&op_ctx, &params));
        let outcome = match self.wall_limit {
            Some(limit) => match tokio::time::timeout(limit, call).await {
                Ok(joined) => joined,
                Err(_) => {
                    self.cancel.store(true, Ordering::SeqCst);
                    let cause = format!("Timeout: exceeded wall limit of {} ms", limit.as_millis());
                    return (Finish::Failed { cause, started_at: Some(started_at) }, Some(running_report));
                }
            },
            None => call.await,
        };
        if self.cancel.load(Ordering::SeqCst) {
            return (Finish::Aborted, Some(running_report));
        }
        let result = match outcome {
            Ok(Ok(bytes)) => bytes,
            Ok(Err(msg)) => {
                return (Finish::Failed { cause: format!("OperationError: {msg}"), started_at: Some(started_at) }, Some(running_report))
            }
            Err(e) => {
                return (Finish::Failed { cause: format!("OperationError: {e}"), started_at: Some(started_at) }, Some(running_report))
            }
        };
        let plan = job.staging.clone();
        let (ws, channels) = (self.workspace.clone(), self.env.channels.clone());
        let finish = match tokio::task::spawn_blocking(move || stage_out(&plan, &ws, &channels)).await {
            Ok(Ok(report)) => Finish::Done { result, report, started_at },
            Ok(Err(f)) => Finish::Failed { cause: format!("StageFailure: {f}"), started_at: Some(started_at) },
            Err(e) => Finish::Failed { cause: format!("StageFailure: {e}"), started_at: Some(started_at) },
        };
        (finish, Some(running_report))
    }
}

/// Deliver a report, retrying transport failures until the scheduler answers.
async fn send_report(container: &Container, req: &DispatchRequest, status: ReportStatus) {
    let report = ExecReport {
        job_id: req.job.job_id,
        dispatch_id: req.dispatch_id,
        node_id: container.node_id(),
        status,
    };
    let payload = encode(&report);
    let give_up = Instant::now() + REPORT_PATIENCE;
    loop {
        if container.is_stopped() {
            return;
        }
        match container
            .call_endpoint(&req.scheduler_endpoint, "scheduler", super::KIND_REPORT, payload.clone(), Duration::from_secs(5))
            .await
        {
            Ok(_) => return,
            Err(crate::container::CallError::Remote(w)) if w.code != "UnknownService" => {
                tracing::debug!(job = %req.job.job_id, error = %w, "report rejected");
                return;
            }
            Err(e) => {
                if Instant::now() >= give_up {
                    tracing::warn!(job = %req.job.job_id, error = %e, "giving up on report");
                    return;
                }
                tokio::time::sleep(Duration::from_millis(250)).await;
            }
        }
    }
}
