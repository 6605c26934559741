use std::sync::Arc;

use async_trait::async_trait;

use super::config::{ContainerConfig, ServiceEntry};
use super::library::ServiceLibrary;
use super::runtime::Container;
use crate::execution::OperationRegistry;
use crate::fabric::{validate_request, ProvisionError, ProvisionRequest, Provider};
use crate::ids::NodeId;

/// Starts new containers inside the current process. Useful for tests and
/// single-host clouds.
pub struct InProcessProvider {
    template: ContainerConfig,
    max_nodes: u32,
    library: ServiceLibrary,
    operations: Option<Arc<OperationRegistry>>,
    started: tokio::sync::Mutex<Vec<Container>>,
}

impl InProcessProvider {
    pub fn new(template: ContainerConfig, max_nodes: u32) -> Self {
        Self {
            template,
            max_nodes,
            library: ServiceLibrary::builtin(),
            operations: None,
            started: tokio::sync::Mutex::new(Vec::new()),
        }
    }

    pub fn with_operations(mut self, operations: Arc<OperationRegistry>) -> Self {
        self.operations = Some(operations);
        self
    }

    /// Containers this provider started that are still running.
    pub async fn containers(&self) -> Vec<Container> {
        let mut started = self.started.lock().await;
        started.retain(|c| !c.is_stopped());
        started.clone()
    }

    pub async fn shutdown(&self) {
        let all: Vec<Container> = self.started.lock().await.drain(..).collect();
        for c in all {
            c.shutdown().await;
        }
    }
}

#[async_trait]
impl Provider for InProcessProvider {
    fn name(&self) -> &str {
        "in-process"
    }

    async fn provision(&self, request: &ProvisionRequest) -> Result<Vec<String>, ProvisionError> {
        validate_request(request)?;
        let mut started = self.started.lock().await;
        started.retain(|c| !c.is_stopped());
        let in_use = started.len() as u32;
        if self.max_nodes == 0 || in_use + request.count > self.max_nodes {
            return Err(ProvisionError::CapacityExceeded { max: self.max_nodes, in_use, requested: request.count });
        }
        let mut endpoints = Vec::new();
        for _ in 0..request.count {
            let mut config = self.template.clone();
            config.node_id = NodeId::new();
            config.listen_endpoint = "127.0.0.1:0".into();
            config.ttl_seconds = request.ttl_seconds;
            config.service_manifest = request.required_services.iter().map(|n| ServiceEntry::new(n)).collect();
            let mut builder = Container::builder(config).library(self.library.clone());
            if let Some(ops) = &self.operations {
                builder = builder.operations(ops.clone());
            }
            let container = builder.start().await.map_err(|e| ProvisionError::ProviderUnavailable(e.to_string()))?;
            endpoints.push(container.endpoint().to_string());
            started.push(container);
        }
        Ok(endpoints)
    }
}
