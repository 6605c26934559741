use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::catalogue::{Catalogue, Heartbeat, MembershipRecord, Timeouts};
use crate::container::{decode, unknown_kind, Environment, Reply, Service, ServiceContext, ServiceEntry, ServiceResult};
use crate::ids::{now_ms, NodeId};
use crate::wire::{ServiceEnvelope, WireError};

pub const KIND_REGISTER: &str = "dir.register";
pub const KIND_HEARTBEAT: &str = "dir.heartbeat";
pub const KIND_QUERY: &str = "dir.query";
pub const KIND_LEAVE: &str = "dir.leave";
pub const KIND_SWEEP: &str = "dir.sweep";

/// Where the catalogue lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogueLocation {
    pub node_id: NodeId,
    pub endpoint: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRequest {
    /// `None` lists every record, dead ones included.
    pub service: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaveRequest {
    pub node_id: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DiscoveryError {
    #[error("no seed reachable among {0:?}")]
    NoSeedReachable(Vec<String>),
}

/// Hosts the catalogue and runs the failure detector on a timer.
pub struct DirectoryService {
    catalogue: Catalogue,
    sweep_period: Duration,
    env: Arc<Environment>,
}

impl DirectoryService {
    /// Options: `sweep_ms` (default: the heartbeat interval).
    pub fn from_entry(entry: &ServiceEntry, env: &Arc<Environment>) -> Result<Self, String> {
        let hb = env.config.heartbeat_interval_ms;
        let mut catalogue = Catalogue::new(Timeouts::from_heartbeat(hb), env.config.license_max_nodes);
        if let Some(snapshot) = &env.restored {
            catalogue.restore(snapshot.members.clone(), now_ms());
        }
        Ok(Self {
            catalogue,
            sweep_period: Duration::from_millis(entry.opt_u64("sweep_ms").unwrap_or(hb)),
            env: env.clone(),
        })
    }

    pub fn catalogue(&self) -> &Catalogue {
        &self.catalogue
    }

    fn publish(&self) {
        let members: Vec<MembershipRecord> = self.catalogue.records().cloned().collect();
        self.env.hub.update(|s| s.members = members);
    }
}

#[async_trait]
impl Service for DirectoryService {
    async fn start(&mut self, ctx: &ServiceContext) -> Result<(), WireError> {
        ctx.every(self.sweep_period, KIND_SWEEP);
        Ok(())
    }

    async fn handle(&mut self, ctx: &ServiceContext, request: ServiceEnvelope) -> ServiceResult {
        match request.kind.as_str() {
            KIND_REGISTER => {
                let record: MembershipRecord = decode(&request.payload)?;
                let (node, endpoint) = (record.node_id, record.endpoint.clone());
                self.catalogue.register(record, now_ms())?;
                ctx.learn_peer(node, &endpoint);
                tracing::info!(%node, %endpoint, "node registered");
                self.publish();
                Ok(Reply::ack())
            }
            KIND_HEARTBEAT => {
                let hb: Heartbeat = decode(&request.payload)?;
                self.catalogue.heartbeat(&hb, now_ms())?;
                Ok(Reply::ack())
            }
            KIND_QUERY => {
                let q: QueryRequest = if request.payload.is_empty() {
                    QueryRequest::default()
                } else {
                    decode(&request.payload)?
                };
                Ok(Reply::json("dir.records", &self.catalogue.query(q.service.as_deref())))
            }
            KIND_LEAVE => {
                let leave: LeaveRequest = decode(&request.payload)?;
                if self.catalogue.leave(leave.node_id).is_some() {
                    tracing::info!(node = %leave.node_id, "node left");
                    self.publish();
                }
                Ok(Reply::ack())
            }
            KIND_SWEEP => {
                let transitions = self.catalogue.sweep(now_ms());
                for t in &transitions {
                    tracing::info!(node = %t.node_id, from = ?t.from, to = ?t.to, "liveness transition");
                }
                if !transitions.is_empty() {
                    self.publish();
                }
                Ok(Reply::json("dir.transitions", &transitions))
            }
            _ => Err(unknown_kind(&request)),
        }
    }
}

/// Ask the catalogue for records hosting `service` (all records if `None`).
pub async fn query_catalogue(
    container: &crate::container::Container,
    service: Option<&str>,
) -> Result<Vec<MembershipRecord>, crate::container::CallError> {
    let location = container
        .catalogue()
        .ok_or_else(|| crate::container::CallError::Remote(WireError::new("NoCatalogue", "catalogue not located")))?;
    let payload = crate::container::encode(&QueryRequest { service: service.map(str::to_string) });
    let bytes = container
        .call_endpoint(&location.endpoint, "directory", KIND_QUERY, payload, container.dispatch_timeout())
        .await?;
    let records: Vec<MembershipRecord> = serde_json::from_slice(&bytes)
        .map_err(|e| crate::container::CallError::Remote(WireError::new("Malformed", e.to_string())))?;
    for r in &records {
        container.learn_peer(r.node_id, &r.endpoint);
    }
    Ok(records)
}
