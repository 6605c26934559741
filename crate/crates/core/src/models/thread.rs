//! Remote threads: a unit of work with a local-thread lifecycle.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::appmodel::{Application, ClientError};
use crate::execution::{JobSpec, JobState, Model, Payload};
use crate::ids::JobId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThreadState {
    Created,
    Started,
    Running,
    Finished,
    Aborted,
}

#[derive(Debug, Error)]
pub enum ThreadError {
    #[error("thread not started")]
    NotStarted,
    #[error("thread already started")]
    AlreadyStarted,
    #[error("join timed out")]
    JoinTimeout,
    #[error("remote operation failed: {0}")]
    Remote(String),
    #[error("thread aborted")]
    Aborted,
    #[error(transparent)]
    Client(ClientError),
}

impl From<ClientError> for ThreadError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Timeout => ThreadError::JoinTimeout,
            other => ThreadError::Client(other),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteThread {
    payload: Payload,
    job: Option<JobId>,
    state: ThreadState,
}

impl RemoteThread {
    pub fn new(payload: Payload) -> Self {
        Self { payload, job: None, state: ThreadState::Created }
    }

    pub fn state(&self) -> ThreadState {
        self.state
    }

    pub fn job_id(&self) -> Option<JobId> {
        self.job
    }

    pub async fn start(&mut self, app: &mut Application) -> Result<(), ThreadError> {
        if self.state != ThreadState::Created {
            return Err(ThreadError::AlreadyStarted);
        }
        app.require_model(Model::Thread)?;
        let id = app.add_unit(JobSpec::new(self.payload.clone()))?;
        app.submit().await?;
        self.job = Some(id);
        self.state = ThreadState::Started;
        Ok(())
    }

    /// Refresh the state from the application's latest events.
    pub async fn refresh(&mut self, app: &mut Application) -> Result<ThreadState, ThreadError> {
        let Some(id) = self.job else { return Ok(self.state) };
        app.poll_events().await?;
        if let Some(u) = app.unit(id) {
            self.state = match u.state {
                JobState::Created | JobState::Queued | JobState::Staging => ThreadState::Started,
                JobState::Running => ThreadState::Running,
                JobState::Completed | JobState::Failed => ThreadState::Finished,
                JobState::Aborted => ThreadState::Aborted,
            };
        }
        Ok(self.state)
    }

    /// Wait for the thread to end; its result, or the remote error.
    pub async fn join(&mut self, app: &mut Application, timeout: Duration) -> Result<Vec<u8>, ThreadError> {
        let Some(id) = self.job else { return Err(ThreadError::NotStarted) };
        let units = app.wait_for(&[id], timeout).await?;
        let unit = &units[&id];
        match unit.state {
            JobState::Completed => {
                self.state = ThreadState::Finished;
                Ok(unit.result.clone().unwrap_or_default())
            }
            JobState::Aborted => {
                self.state = ThreadState::Aborted;
                Err(ThreadError::Aborted)
            }
            _ => {
                self.state = ThreadState::Finished;
                Err(ThreadError::Remote(unit.failure_cause.clone().unwrap_or_default()))
            }
        }
    }

    pub async fn abort(&mut self, app: &mut Application) -> Result<(), ThreadError> {
        let Some(id) = self.job else { return Err(ThreadError::NotStarted) };
        app.abort_unit(id).await?;
        self.refresh(app).await?;
        Ok(())
    }
}
