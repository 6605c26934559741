use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use tokio::time::Instant;

use super::client::{ClientError, CloudClient};
use crate::execution::{
    AbortJob, AppRef, AppState, ApplicationRecord, ApplicationView, EventsPage, EventsRequest, JobEvent, JobSpec,
    JobState, Model, SubmitAck, SubmitJobs, KIND_ABORT, KIND_APP_STOP, KIND_EVENTS, KIND_SUBMIT,
};
use crate::ids::{AppId, JobId};
use crate::storage::FileDescriptor;

const POLL: Duration = Duration::from_millis(25);

/// Client-side mirror of one job. `unit_id` equals the job id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitStatus {
    pub unit_id: JobId,
    pub state: JobState,
    /// Sequence number of the last event applied.
    pub seq: u64,
    pub result: Option<Vec<u8>>,
    pub failure_cause: Option<String>,
    pub outputs: Vec<FileDescriptor>,
}

impl UnitStatus {
    fn created(unit_id: JobId) -> Self {
        Self { unit_id, state: JobState::Created, seq: 0, result: None, failure_cause: None, outputs: Vec::new() }
    }

    pub fn is_terminal(&self) -> bool {
        self.state.is_terminal()
    }

    /// Apply `event` unless it is a duplicate or older than what we hold.
    fn apply(&mut self, event: &JobEvent) -> bool {
        if event.seq <= self.seq {
            return false;
        }
        self.seq = event.seq;
        self.state = event.state;
        self.result = event.result.clone();
        self.failure_cause = event.failure_cause.clone();
        self.outputs = event.outputs.clone();
        true
    }
}

/// Keeps the event cursor and drops repeats by per-unit sequence number.
#[derive(Debug, Default)]
struct EventCursor {
    cursor: usize,
    seen: HashMap<JobId, u64>,
}

impl EventCursor {
    async fn fetch(&mut self, client: &CloudClient, app_id: AppId) -> Result<(Vec<JobEvent>, AppState), ClientError> {
        let mut page: EventsPage =
            client.call("scheduler", KIND_EVENTS, &EventsRequest { app_id, cursor: self.cursor }).await?;
        if page.cursor < self.cursor {
            // The master restarted and rebuilt its log; replay and dedup.
            self.cursor = 0;
            page = client.call("scheduler", KIND_EVENTS, &EventsRequest { app_id, cursor: 0 }).await?;
        }
        self.cursor = page.cursor;
        let fresh = page
            .events
            .into_iter()
            .filter(|e| {
                let last = self.seen.entry(e.job_id).or_insert(0);
                if e.seq > *last {
                    *last = e.seq;
                    true
                } else {
                    false
                }
            })
            .collect();
        Ok((fresh, page.app_state))
    }
}

/// A running application as seen from the client: the unit of deployment
/// plus the units it owns.
#[derive(Debug)]
pub struct Application {
    client: CloudClient,
    record: ApplicationRecord,
    pending: Vec<JobSpec>,
    units: BTreeMap<JobId, UnitStatus>,
    events: EventCursor,
    app_state: AppState,
    stopped: bool,
}

impl Application {
    pub(crate) fn new(client: CloudClient, record: ApplicationRecord) -> Self {
        let app_state = record.state;
        Self {
            client,
            record,
            pending: Vec::new(),
            units: BTreeMap::new(),
            events: EventCursor::default(),
            app_state,
            stopped: false,
        }
    }

    pub(crate) fn attach(client: CloudClient, view: ApplicationView) -> Self {
        let mut app = Self::new(client, view.application);
        app.stopped = app.record.state == AppState::Stopped;
        for job in view.jobs {
            let mut unit = UnitStatus::created(job.job_id);
            unit.state = job.state;
            unit.result = job.result;
            unit.failure_cause = job.failure_cause;
            unit.outputs = job.outputs;
            app.units.insert(job.job_id, unit);
        }
        app
    }

    pub fn id(&self) -> AppId {
        self.record.app_id
    }

    pub fn model(&self) -> Model {
        self.record.model
    }

    pub fn record(&self) -> &ApplicationRecord {
        &self.record
    }

    pub fn client(&self) -> &CloudClient {
        &self.client
    }

    /// Last application state reported by the master.
    pub fn state(&self) -> AppState {
        if self.stopped { AppState::Stopped } else { self.app_state }
    }

    pub fn require_model(&self, expected: Model) -> Result<(), ClientError> {
        if self.record.model == expected {
            Ok(())
        } else {
            Err(ClientError::WrongModel { expected, actual: self.record.model })
        }
    }

    pub fn units(&self) -> &BTreeMap<JobId, UnitStatus> {
        &self.units
    }

    pub fn unit(&self, id: JobId) -> Option<&UnitStatus> {
        self.units.get(&id)
    }

    /// Queue a unit for the next [`submit`](Self::submit). Allowed before and
    /// after earlier submits.
    pub fn add_unit(&mut self, mut spec: JobSpec) -> Result<JobId, ClientError> {
        if self.stopped {
            return Err(ClientError::AppStopped);
        }
        let id = *spec.job_id.get_or_insert_with(JobId::new);
        if self.units.contains_key(&id) {
            return Err(ClientError::Rejected(format!("unit {id} already added")));
        }
        self.units.insert(id, UnitStatus::created(id));
        self.pending.push(spec);
        Ok(id)
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    /// Send every pending unit as one all-or-nothing batch.
    pub async fn submit(&mut self) -> Result<Vec<JobId>, ClientError> {
        if self.stopped {
            return Err(ClientError::AppStopped);
        }
        let jobs = std::mem::take(&mut self.pending);
        let msg = SubmitJobs { credentials: self.client.credentials().clone(), app_id: self.id(), jobs };
        match self.client.call::<_, SubmitAck>("scheduler", KIND_SUBMIT, &msg).await {
            Ok(ack) => {
                if self.app_state == AppState::Created {
                    self.app_state = AppState::Running;
                }
                Ok(ack.job_ids)
            }
            Err(e) => {
                self.pending = msg.jobs;
                Err(e)
            }
        }
    }

    /// Fetch new events and fold them into the unit table. Returns the
    /// events that were not seen before.
    pub async fn poll_events(&mut self) -> Result<Vec<JobEvent>, ClientError> {
        let (events, app_state) = self.events.fetch(&self.client, self.id()).await?;
        self.app_state = app_state;
        for e in &events {
            self.units.entry(e.job_id).or_insert_with(|| UnitStatus::created(e.job_id)).apply(e);
        }
        Ok(events)
    }

    /// Block until every submitted unit is terminal.
    pub async fn wait(&mut self, timeout: Duration) -> Result<BTreeMap<JobId, UnitStatus>, ClientError> {
        let ids: Vec<JobId> = self.units.keys().copied().collect();
        self.wait_for(&ids, timeout).await
    }

    /// Block until the listed units are terminal. Returns the whole table.
    pub async fn wait_for(&mut self, ids: &[JobId], timeout: Duration) -> Result<BTreeMap<JobId, UnitStatus>, ClientError> {
        if !self.pending.is_empty() {
            self.submit().await?;
        }
        let deadline = Instant::now() + timeout;
        loop {
            self.poll_events().await?;
            let done = ids.iter().all(|id| self.units.get(id).is_some_and(UnitStatus::is_terminal));
            if done {
                return Ok(self.units.clone());
            }
            if Instant::now() >= deadline {
                return Err(ClientError::Timeout);
            }
            tokio::time::sleep(POLL.min(deadline.saturating_duration_since(Instant::now()))).await;
        }
    }

    pub async fn abort_unit(&mut self, job_id: JobId) -> Result<(), ClientError> {
        let msg = AbortJob { credentials: self.client.credentials().clone(), job_id };
        self.client.call_raw("scheduler", KIND_ABORT, crate::container::encode(&msg)).await?;
        self.poll_events().await?;
        Ok(())
    }

    /// Abort outstanding units and move the application to stopped.
    pub async fn stop(&mut self) -> Result<(), ClientError> {
        let msg = AppRef { credentials: self.client.credentials().clone(), app_id: self.id() };
        self.client.call_raw("scheduler", KIND_APP_STOP, crate::container::encode(&msg)).await?;
        self.stopped = true;
        self.pending.clear();
        self.poll_events().await?;
        Ok(())
    }

    /// Stream of lifecycle events on its own task. A new subscription
    /// replays history first, so subscribing late still shows terminal
    /// states.
    pub fn subscribe(&self, period: Duration) -> EventSubscription {
        let (tx, rx) = mpsc::unbounded_channel();
        let client = self.client.clone();
        let app_id = self.id();
        let task = tokio::spawn(async move {
            let mut cursor = EventCursor::default();
            loop {
                match cursor.fetch(&client, app_id).await {
                    Ok((events, _)) => {
                        for e in events {
                            if tx.send(e).is_err() {
                                return;
                            }
                        }
                    }
                    Err(e) => tracing::debug!(error = %e, "event poll failed"),
                }
                if tx.is_closed() {
                    return;
                }
                tokio::time::sleep(period).await;
            }
        });
        EventSubscription { rx, task }
    }

    /// Call `f` for each event on a dedicated task. `f` must not block.
    pub fn on_event<F>(&self, period: Duration, mut f: F) -> JoinHandle<()>
    where
        F: FnMut(JobEvent) + Send + 'static,
    {
        let mut sub = self.subscribe(period);
        tokio::spawn(async move {
            while let Some(e) = sub.recv().await {
                f(e);
            }
        })
    }
}

/// Live event feed; dropping it stops the poller.
pub struct EventSubscription {
    rx: mpsc::UnboundedReceiver<JobEvent>,
    task: JoinHandle<()>,
}

impl EventSubscription {
    pub async fn recv(&mut self) -> Option<JobEvent> {
        self.rx.recv().await
    }

    pub fn try_recv(&mut self) -> Option<JobEvent> {
        self.rx.try_recv().ok()
    }
}

impl Drop for EventSubscription {
    fn drop(&mut self) {
        self.task.abort();
    }
}
