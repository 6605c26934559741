use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;

use super::channel::{ChannelServer, DataChannelSpec, ServerOptions};
use crate::container::{unknown_kind, Environment, Reply, Service, ServiceContext, ServiceEntry, ServiceResult};
use crate::wire::{ServiceEnvelope, WireError};

pub const KIND_SPEC: &str = "storage.spec";
pub const KIND_CATALOGUE: &str = "storage.catalogue";
const KIND_PUBLISH: &str = "storage.publish";

/// Hosts one channel server and advertises how to reach it.
pub struct StorageService {
    scheme: String,
    options: ServerOptions,
    server: Option<Arc<dyn ChannelServer>>,
    env: Arc<Environment>,
}

impl StorageService {
    /// Options: `scheme` ("aftp"), `listen` ("127.0.0.1:0"), `root`, `token`.
    pub fn from_entry(entry: &ServiceEntry, env: &Arc<Environment>) -> Result<Self, String> {
        let host = env.config.listen_endpoint.rsplit_once(':').map(|(h, _)| h).unwrap_or("127.0.0.1");
        let root_dir = entry
            .opt_str("root")
            .map(PathBuf::from)
            .or_else(|| env.config.work_dir.as_ref().map(|w| w.join("storage")))
            .unwrap_or_else(|| std::env::temp_dir().join(format!("cirrus-{}", env.config.node_id)).join("storage"));
        Ok(Self {
            scheme: entry.opt_str("scheme").unwrap_or("aftp").to_string(),
            options: ServerOptions {
                listen: entry.opt_str("listen").map(str::to_string).unwrap_or_else(|| format!("{host}:0")),
                root_dir,
                token: entry.opt_str("token").unwrap_or("").to_string(),
            },
            server: None,
            env: env.clone(),
        })
    }

    /// Spec clients use to reach this storage, token included.
    pub fn client_spec(&self) -> Option<DataChannelSpec> {
        self.server.as_ref().map(|s| {
            let mut spec = s.spec();
            spec.credentials = self.options.token.clone();
            spec
        })
    }

    fn publish(&self) {
        if let Some(server) = &self.server {
            let catalogue = server.catalogue();
            self.env.hub.update(|s| s.storage_catalogue = catalogue);
        }
    }
}

#[async_trait]
impl Service for StorageService {
    async fn start(&mut self, ctx: &ServiceContext) -> Result<(), WireError> {
        let server = self
            .env
            .channels
            .serve(&self.scheme, &self.options)
            .map_err(|e| WireError::new("StorageUnavailable", e.to_string()))?;
        tracing::info!(spec = %server.spec(), "storage serving");
        self.server = Some(server);
        ctx.every(Duration::from_secs(5), KIND_PUBLISH);
        Ok(())
    }

    async fn handle(&mut self, _ctx: &ServiceContext, request: ServiceEnvelope) -> ServiceResult {
        match request.kind.as_str() {
            KIND_SPEC => {
                let spec = self.client_spec().ok_or_else(|| WireError::new("StorageUnavailable", "not started"))?;
                Ok(Reply::json("storage.spec", &spec))
            }
            KIND_CATALOGUE => {
                let catalogue = self.server.as_ref().map(|s| s.catalogue()).unwrap_or_default();
                Ok(Reply::json("storage.catalogue", &catalogue))
            }
            KIND_PUBLISH => {
                self.publish();
                Ok(Reply::ack())
            }
            _ => Err(unknown_kind(&request)),
        }
    }

    async fn stop(&mut self, _ctx: &ServiceContext) {
        self.publish();
        if let Some(server) = self.server.take() {
            server.shutdown();
        }
    }
}
