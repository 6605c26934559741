use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{AppId, JobId, MessageId, NodeId, TimestampMs};
use crate::storage::{DataChannelSpec, FileDescriptor, StagingPlan};
use crate::transversal::Credentials;
use crate::wire::WireError;

pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Task,
    Thread,
    Mapreduce,
}

impl std::str::FromStr for Model {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "task" => Ok(Model::Task),
            "thread" => Ok(Model::Thread),
            "mapreduce" => Ok(Model::Mapreduce),
            other => Err(format!("unknown model {other:?}")),
        }
    }
}

/// A registered operation name plus its parameter bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payload {
    pub operation: String,
    #[serde(with = "crate::wire::base64_bytes")]
    pub params: Vec<u8>,
}

impl Payload {
    pub fn new(operation: &str, params: impl Into<Vec<u8>>) -> Self {
        Self { operation: operation.into(), params: params.into() }
    }

    pub fn json<T: Serialize>(operation: &str, params: &T) -> Self {
        Self::new(operation, serde_json::to_vec(params).expect("params serialize"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Created,
    Queued,
    Staging,
    Running,
    Completed,
    Failed,
    Aborted,
}

impl JobState {
    pub const ALL: [JobState; 7] = [
        JobState::Created,
        JobState::Queued,
        JobState::Staging,
        JobState::Running,
        JobState::Completed,
        JobState::Failed,
        JobState::Aborted,
    ];

    /// A failed job that still has attempts left is requeued straight away,
    /// so a stored `Failed` is final.
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Completed | JobState::Failed | JobState::Aborted)
    }

    /// Allowed edges. `staging → failed` covers staging errors and
    /// `staging → queued` a dispatch the executor refused.
    pub fn can_become(self, next: JobState, attempts: u32, max_attempts: u32) -> bool {
        use JobState::*;
        match (self, next) {
            (Created, Queued) | (Queued, Staging) | (Staging, Running) => true,
            (Running, Completed) | (Running, Failed) | (Staging, Failed) | (Staging, Queued) => true,
            (Queued | Staging | Running, Aborted) => true,
            (Failed, Queued) => attempts < max_attempts,
            _ => false,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Created => "created",
            JobState::Queued => "queued",
            JobState::Staging => "staging",
            JobState::Running => "running",
            JobState::Completed => "completed",
            JobState::Failed => "failed",
            JobState::Aborted => "aborted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobDescriptor {
    pub job_id: JobId,
    pub app_id: AppId,
    pub model: Model,
    pub payload: Payload,
    #[serde(default)]
    pub staging: StagingPlan,
    pub state: JobState,
    pub assigned_node: Option<NodeId>,
    pub attempts: u32,
    pub max_attempts: u32,
    #[serde(default, with = "crate::wire::base64_opt")]
    pub result: Option<Vec<u8>>,
    pub failure_cause: Option<String>,
    /// Outputs uploaded by the successful attempt.
    #[serde(default)]
    pub outputs: Vec<FileDescriptor>,
    /// Declared outputs the successful attempt did not produce.
    #[serde(default)]
    pub missing_outputs: Vec<String>,
    /// Position in the FIFO queue; later enqueues get larger values.
    #[serde(default)]
    pub enqueue_seq: u64,
    /// Identifies the current dispatch so late reports can be told apart.
    #[serde(default)]
    pub dispatch_id: Option<MessageId>,
    #[serde(default)]
    pub event_seq: u64,
}

impl JobDescriptor {
    pub fn new(app_id: AppId, model: Model, payload: Payload) -> Self {
        Self {
            job_id: JobId::new(),
            app_id,
            model,
            payload,
            staging: StagingPlan::default(),
            state: JobState::Created,
            assigned_node: None,
            attempts: 0,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            result: None,
            failure_cause: None,
            outputs: Vec::new(),
            missing_outputs: Vec::new(),
            enqueue_seq: 0,
            dispatch_id: None,
            event_seq: 0,
        }
    }

    pub fn with_staging(mut self, staging: StagingPlan) -> Self {
        self.staging = staging;
        self
    }

    /// Move along an allowed edge.
    pub fn transition(&mut self, next: JobState) -> Result<(), ExecError> {
        if !self.state.can_become(next, self.attempts, self.max_attempts) {
            return Err(ExecError::IllegalTransition { job: self.job_id, from: self.state, to: next });
        }
        self.state = next;
        Ok(())
    }
}

/// What a client hands the scheduler for one job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    #[serde(default)]
    pub job_id: Option<JobId>,
    pub payload: Payload,
    #[serde(default)]
    pub staging: StagingPlan,
    #[serde(default)]
    pub max_attempts: Option<u32>,
}

impl JobSpec {
    pub fn new(payload: Payload) -> Self {
        Self { job_id: None, payload, staging: StagingPlan::default(), max_attempts: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AppState {
    Created,
    Running,
    Stopped,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplicationRecord {
    pub app_id: AppId,
    pub model: Model,
    pub display_name: String,
    pub credentials: Credentials,
    #[serde(default)]
    pub channels: Vec<DataChannelSpec>,
    #[serde(default)]
    pub shared_inputs: Vec<FileDescriptor>,
    pub state: AppState,
    pub created_at: TimestampMs,
}

impl ApplicationRecord {
    pub fn owner(&self) -> &str {
        &self.credentials.user_id
    }
}

/// The single terminal entry a job gets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerminalRecord {
    pub job_id: JobId,
    pub app_id: AppId,
    pub state: JobState,
    pub at: TimestampMs,
}

/// Per-job lifecycle event; `seq` increases per job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobEvent {
    pub app_id: AppId,
    pub job_id: JobId,
    pub seq: u64,
    pub state: JobState,
    pub at: TimestampMs,
    #[serde(default, with = "crate::wire::base64_opt")]
    pub result: Option<Vec<u8>>,
    #[serde(default)]
    pub failure_cause: Option<String>,
    #[serde(default)]
    pub outputs: Vec<FileDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("unknown application {0}")]
    UnknownApplication(AppId),
    #[error("unknown operation {0}")]
    UnknownOperation(String),
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("job {job}: {from:?} -> {to:?} is not allowed")]
    IllegalTransition { job: JobId, from: JobState, to: JobState },
    #[error("unauthorized")]
    Unauthorized,
    #[error("invalid job: {0}")]
    InvalidJob(String),
}

impl From<ExecError> for WireError {
    fn from(e: ExecError) -> Self {
        let code = match e {
            ExecError::UnknownApplication(_) => "UnknownApplication",
            ExecError::UnknownOperation(_) => "UnknownOperation",
            ExecError::UnknownJob(_) => "UnknownJob",
            ExecError::IllegalTransition { .. } => "IllegalTransition",
            ExecError::Unauthorized => "Unauthorized",
            ExecError::InvalidJob(_) => "InvalidJob",
        };
        WireError::new(code, e.to_string())
    }
}
