use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpStream;

use super::application::Application;
use crate::container::{encode, CallError, DispatchError};
use crate::directory::{MembershipRecord, QueryRequest, KIND_QUERY};
use crate::execution::{
    AppRef, ApplicationRecord, ApplicationView, CreateApp, JobDescriptor, Model, SchedulerStats, UsageReport,
    KIND_APP_CREATE, KIND_APP_GET, KIND_JOB, KIND_STATS, KIND_USAGE,
};
use crate::ids::{AppId, JobId, NodeId, ReservationId};
use crate::reservation::{
    AcceptMessage, BindMessage, CancelMessage, CounterOffer, NegotiationOutcome, RequestMessage, Reservation,
    ReservationRequest, KIND_ACCEPT, KIND_BIND, KIND_CANCEL, KIND_LIST, KIND_REQUEST,
};
use crate::storage::DataChannelSpec;
use crate::transversal::Credentials;
use crate::wire::{recv_envelope, send_envelope, ServiceEnvelope, WireError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("cannot connect to {endpoint}: {reason}")]
    ConnectionFailed { endpoint: String, reason: String },
    #[error("authentication failed")]
    AuthFailed,
    #[error("not found: {0}")]
    NotFound(String),
    #[error("rejected: {0}")]
    Rejected(String),
    #[error("timed out")]
    Timeout,
    #[error("application is stopped")]
    AppStopped,
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("application model is {actual:?}, expected {expected:?}")]
    WrongModel { expected: Model, actual: Model },
    #[error("remote error {0}")]
    Remote(WireError),
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl From<WireError> for ClientError {
    fn from(e: WireError) -> Self {
        match e.code.as_str() {
            "Unauthorized" | "Unauthenticated" | "AuthFailed" => ClientError::AuthFailed,
            "UnknownApplication" | "UnknownJob" | "NotFound" | "UnknownService" => ClientError::NotFound(e.message),
            "LicenseRejected" | "InvalidRequest" | "NotCancellable" => ClientError::Rejected(e.message),
            "Timeout" => ClientError::Timeout,
            _ => ClientError::Remote(e),
        }
    }
}

impl From<CallError> for ClientError {
    fn from(e: CallError) -> Self {
        match e {
            CallError::Remote(w) => w.into(),
            CallError::Dispatch(DispatchError::Timeout(_)) => ClientError::Timeout,
            CallError::Dispatch(other) => ClientError::Protocol(other.to_string()),
        }
    }
}

/// Client settings file (TOML):
///
/// ```toml
/// master = "127.0.0.1:7000"
/// user = "alice"
/// token = "secret"
/// channels = ["aftp://127.0.0.1:7100/data"]
/// timeout_ms = 10000
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub master: String,
    #[serde(default = "anonymous_user")]
    pub user: String,
    #[serde(default)]
    pub token: String,
    #[serde(default)]
    pub channels: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
}

fn anonymous_user() -> String {
    "anonymous".into()
}
fn default_timeout() -> u64 {
    10_000
}

impl ClientConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn credentials(&self) -> Credentials {
        Credentials::new(&self.user, &self.token)
    }

    pub fn channel_specs(&self) -> Result<Vec<DataChannelSpec>, String> {
        self.channels.iter().map(|c| c.parse().map_err(|e| format!("{c}: {e}"))).collect()
    }
}

/// Talks to a master over the container envelope protocol. Behaves like a
/// container without services: it only sends requests.
#[derive(Debug, Clone)]
pub struct CloudClient {
    master: String,
    credentials: Credentials,
    node_id: NodeId,
    timeout: Duration,
}

impl CloudClient {
    pub fn new(master: impl Into<String>, credentials: Credentials) -> Self {
        Self { master: master.into(), credentials, node_id: NodeId::new(), timeout: Duration::from_secs(10) }
    }

    pub fn from_config(config: &ClientConfig) -> Self {
        Self::new(&config.master, config.credentials()).with_timeout(Duration::from_millis(config.timeout_ms))
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn master(&self) -> &str {
        &self.master
    }

    pub fn credentials(&self) -> &Credentials {
        &self.credentials
    }

    /// One request, one connection, no connect retry.
    pub async fn call_raw(&self, service: &str, kind: &str, payload: Vec<u8>) -> Result<Vec<u8>, ClientError> {
        let envelope = ServiceEnvelope::request(self.node_id, NodeId::nil(), service, kind, payload);
        let exchange = async {
            let mut stream = TcpStream::connect(&self.master).await.map_err(|e| ClientError::ConnectionFailed {
                endpoint: self.master.clone(),
                reason: e.to_string(),
            })?;
            let _ = stream.set_nodelay(true);
            send_envelope(&mut stream, &envelope).await.map_err(|e| ClientError::Protocol(e.to_string()))?;
            recv_envelope(&mut stream).await.map_err(|e| ClientError::Protocol(e.to_string()))
        };
        let reply = tokio::time::timeout(self.timeout, exchange).await.map_err(|_| ClientError::Timeout)??;
        if reply.reply_to != Some(envelope.message_id) {
            return Err(ClientError::Protocol("uncorrelated reply".into()));
        }
        if reply.is_error() {
            let err: WireError = serde_json::from_slice(&reply.payload)
                .unwrap_or_else(|_| WireError::new("Malformed", "undecodable error reply"));
            return Err(err.into());
        }
        Ok(reply.payload)
    }

    pub async fn call<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        service: &str,
        kind: &str,
        request: &Req,
    ) -> Result<Resp, ClientError> {
        let bytes = self.call_raw(service, kind, encode(request)).await?;
        serde_json::from_slice(&bytes).map_err(|e| ClientError::Protocol(e.to_string()))
    }

    pub async fn create_application(
        &self,
        model: Model,
        display_name: &str,
        channels: Vec<DataChannelSpec>,
    ) -> Result<Application, ClientError> {
        let msg = CreateApp {
            credentials: self.credentials.clone(),
            model,
            display_name: display_name.to_string(),
            channels,
            shared_inputs: Vec::new(),
        };
        let record: ApplicationRecord = self.call("scheduler", KIND_APP_CREATE, &msg).await?;
        Ok(Application::new(self.clone(), record))
    }

    /// Same as [`create_application`](Self::create_application) with the
    /// model given by name.
    pub async fn create_application_named(&self, model: &str, display_name: &str) -> Result<Application, ClientError> {
        let model: Model = model.parse().map_err(|_| ClientError::UnknownModel(model.to_string()))?;
        self.create_application(model, display_name, Vec::new()).await
    }

    /// Attach to an existing application, e.g. to watch it.
    pub async fn open_application(&self, app_id: AppId) -> Result<Application, ClientError> {
        let view = self.application_view(app_id).await?;
        Ok(Application::attach(self.clone(), view))
    }

    pub async fn application_view(&self, app_id: AppId) -> Result<ApplicationView, ClientError> {
        self.call("scheduler", KIND_APP_GET, &AppRef { credentials: self.credentials.clone(), app_id }).await
    }

    pub async fn job(&self, job_id: JobId) -> Result<JobDescriptor, ClientError> {
        self.call("scheduler", KIND_JOB, &job_id).await
    }

    pub async fn nodes(&self) -> Result<Vec<MembershipRecord>, ClientError> {
        self.call("directory", KIND_QUERY, &QueryRequest { service: None }).await
    }

    pub async fn scheduler_stats(&self) -> Result<SchedulerStats, ClientError> {
        self.call("scheduler", KIND_STATS, &()).await
    }

    pub async fn usage(&self) -> Result<UsageReport, ClientError> {
        self.call("scheduler", KIND_USAGE, &()).await
    }

    pub async fn reservations(&self) -> Result<Vec<Reservation>, ClientError> {
        self.call("reservation", KIND_LIST, &()).await
    }

    pub async fn request_reservation(&self, request: ReservationRequest) -> Result<NegotiationOutcome, ClientError> {
        self.call("reservation", KIND_REQUEST, &RequestMessage { credentials: self.credentials.clone(), request })
            .await
    }

    pub async fn accept_counter(&self, offer: CounterOffer) -> Result<NegotiationOutcome, ClientError> {
        self.call("reservation", KIND_ACCEPT, &AcceptMessage { credentials: self.credentials.clone(), offer }).await
    }

    /// Request, then accept counter-offers until the outcome is final.
    pub async fn negotiate(&self, request: ReservationRequest) -> Result<NegotiationOutcome, ClientError> {
        let mut outcome = self.request_reservation(request).await?;
        while let NegotiationOutcome::Counter { offer } = outcome {
            outcome = self.accept_counter(offer).await?;
        }
        Ok(outcome)
    }

    pub async fn cancel_reservation(&self, reservation_id: ReservationId) -> Result<(), ClientError> {
        let msg = CancelMessage { credentials: self.credentials.clone(), reservation_id };
        self.call_raw("reservation", KIND_CANCEL, encode(&msg)).await.map(|_| ())
    }

    pub async fn bind_reservation(&self, reservation_id: ReservationId, app_id: AppId) -> Result<(), ClientError> {
        let msg = BindMessage { credentials: self.credentials.clone(), reservation_id, app_id };
        self.call_raw("reservation", KIND_BIND, encode(&msg)).await.map(|_| ())
    }
}
