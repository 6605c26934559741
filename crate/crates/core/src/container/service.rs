use std::time::Duration;

use async_trait::async_trait;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::time::Instant;

use crate::wire::{ServiceEnvelope, WireError};

/// Body of a successful reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub kind: String,
    pub payload: Vec<u8>,
}

impl Reply {
    pub fn ack() -> Self {
        Self { kind: "ack".into(), payload: Vec::new() }
    }

    pub fn json<T: Serialize>(kind: &str, value: &T) -> Self {
        Self { kind: kind.into(), payload: serde_json::to_vec(value).expect("reply serializes") }
    }
}

pub type ServiceResult = Result<Reply, WireError>;

/// Decode a JSON payload, answering `BadRequest` on failure.
pub fn decode<T: DeserializeOwned>(payload: &[u8]) -> Result<T, WireError> {
    serde_json::from_slice(payload).map_err(|e| WireError::new("BadRequest", e.to_string()))
}

pub fn encode<T: Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("payload serializes")
}

pub fn unknown_kind(env: &ServiceEnvelope) -> WireError {
    WireError::new("UnknownKind", format!("{} does not handle {}", env.target_service, env.kind))
}

/// A named unit hosted by a container.
///
/// The container feeds each service its messages one at a time, in arrival
/// order, so implementations keep plain `&mut self` state.
#[async_trait]
pub trait Service: Send {
    async fn start(&mut self, _ctx: &super::ServiceContext) -> Result<(), WireError> {
        Ok(())
    }

    async fn handle(&mut self, ctx: &super::ServiceContext, request: ServiceEnvelope) -> ServiceResult;

    /// Finish in-flight work before removal. Runs after every message queued
    /// ahead of it.
    async fn drain(&mut self, _ctx: &super::ServiceContext, _deadline: Instant) -> Result<(), WireError> {
        Ok(())
    }

    async fn stop(&mut self, _ctx: &super::ServiceContext) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServiceState {
    Loaded,
    Started,
    Stopped,
    Failed,
}

impl ServiceState {
    /// loaded→started→stopped, anything→failed.
    pub fn can_become(self, next: ServiceState) -> bool {
        matches!(
            (self, next),
            (ServiceState::Loaded, ServiceState::Started)
                | (ServiceState::Started, ServiceState::Stopped)
                | (_, ServiceState::Failed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceRegistration {
    pub name: String,
    pub state: ServiceState,
}

/// Transport-level dispatch failure.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DispatchError {
    #[error("unknown node {0}")]
    UnknownNode(crate::ids::NodeId),
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("container is shutting down")]
    ShuttingDown,
}

/// Failure of a request/reply call.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CallError {
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error("remote error {0}")]
    Remote(WireError),
}

impl CallError {
    /// Error code of a remote error reply, if this is one.
    pub fn code(&self) -> Option<&str> {
        match self {
            CallError::Remote(w) => Some(w.code.as_str()),
            _ => None,
        }
    }

    pub fn is_timeout(&self) -> bool {
        matches!(self, CallError::Dispatch(DispatchError::Timeout(_)))
    }
}

impl From<CallError> for WireError {
    fn from(e: CallError) -> Self {
        match e {
            CallError::Remote(w) => w,
            CallError::Dispatch(DispatchError::Timeout(d)) => WireError::new("Timeout", format!("{d:?}")),
            CallError::Dispatch(DispatchError::UnknownNode(n)) => WireError::new("UnknownNode", n.to_string()),
            CallError::Dispatch(other) => WireError::new("Unreachable", other.to_string()),
        }
    }
}

#[derive(Debug, Error)]
pub enum StartError {
    #[error("cannot bind {endpoint}: {reason}")]
    BindFailure { endpoint: String, reason: String },
    #[error("service {name} failed to load: {reason}")]
    ServiceLoadFailure { name: String, reason: String },
    #[error(transparent)]
    Config(#[from] super::ConfigError),
    #[error("persistence: {0}")]
    Store(#[from] crate::transversal::StoreError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InstallError {
    #[error("service {0} is already installed")]
    AlreadyInstalled(String),
    #[error("service {0} is not installed")]
    NotInstalled(String),
    #[error("service {0} did not drain before the deadline")]
    DrainTimeout(String),
    #[error("service {name} failed to load: {reason}")]
    LoadFailure { name: String, reason: String },
}

impl From<InstallError> for WireError {
    fn from(e: InstallError) -> Self {
        let code = match &e {
            InstallError::AlreadyInstalled(_) => "AlreadyInstalled",
            InstallError::NotInstalled(_) => "NotInstalled",
            InstallError::DrainTimeout(_) => "DrainTimeout",
            InstallError::LoadFailure { .. } => "ServiceLoadFailure",
        };
        WireError::new(code, e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_edges() {
        use ServiceState::*;
        assert!(Loaded.can_become(Started));
        assert!(Started.can_become(Stopped));
        assert!(Stopped.can_become(Failed));
        assert!(!Stopped.can_become(Started));
        assert!(!Loaded.can_become(Stopped));
    }
}
