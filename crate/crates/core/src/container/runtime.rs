use std::collections::HashMap;
use std::future::Future;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinHandle;
use tokio::time::Instant;

use super::config::{ContainerConfig, ServiceEntry};
use super::library::ServiceLibrary;
use super::service::{
    decode, encode, CallError, DispatchError, InstallError, Reply, Service, ServiceRegistration,
    ServiceState, StartError,
};
use crate::directory::{self, CatalogueLocation, Heartbeat, MembershipRecord};
use crate::execution::OperationRegistry;
use crate::fabric::{probe_static, DynamicSampler, Provider};
use crate::ids::{now_ms, NodeId};
use crate::storage::ChannelRegistry;
use crate::transversal::{
    Action, CloudSnapshot, Credentials, DurableStore, PersistenceProvider, Security, SnapshotHub,
    TokenProvider, VolatileStore,
};
use crate::wire::{recv_envelope, send_envelope, FrameError, ServiceEnvelope, WireError};

/// Name the container answers to for its own built-in verbs.
pub const CONTAINER_SERVICE: &str = "container";
/// Snapshot cadence for dirty state.
pub const SNAPSHOT_PERIOD: Duration = Duration::from_secs(5);

/// Everything services share within one container.
pub struct Environment {
    pub config: ContainerConfig,
    pub security: Security,
    pub channels: ChannelRegistry,
    pub operations: Arc<OperationRegistry>,
    pub hub: Arc<SnapshotHub>,
    /// Snapshot found at startup, if any.
    pub restored: Option<CloudSnapshot>,
    pub sampler: Arc<DynamicSampler>,
    pub provider: Option<Arc<dyn Provider>>,
}

impl std::fmt::Debug for Environment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Environment")
            .field("node", &self.config.node_id)
            .field("security", &self.security)
            .field("hub", &self.hub)
            .finish_non_exhaustive()
    }
}

enum Mail {
    Request(ServiceEnvelope, oneshot::Sender<Result<Reply, WireError>>),
    Drain(Instant, oneshot::Sender<Result<(), WireError>>),
    Stop(oneshot::Sender<()>),
}

struct ServiceSlot {
    name: String,
    state: ServiceState,
    mailbox: mpsc::UnboundedSender<Mail>,
    task: JoinHandle<()>,
    timers: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

struct Inner {
    env: Arc<Environment>,
    node_id: NodeId,
    endpoint: String,
    library: ServiceLibrary,
    services: Mutex<Vec<ServiceSlot>>,
    peers: RwLock<HashMap<NodeId, String>>,
    catalogue: RwLock<Option<CatalogueLocation>>,
    tasks: Mutex<Vec<JoinHandle<()>>>,
    stopped: watch::Sender<bool>,
    shutting_down: AtomicBool,
    admin: tokio::sync::Mutex<()>,
    heartbeat_sequence: AtomicU64,
}

/// Handle to a running container. Cheap to clone.
#[derive(Clone)]
pub struct Container {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Container {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Container")
            .field("node_id", &self.inner.node_id)
            .field("endpoint", &self.inner.endpoint)
            .finish()
    }
}

/// What a running container reports about itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerInfo {
    pub node_id: NodeId,
    pub name: String,
    pub endpoint: String,
    pub services: Vec<ServiceRegistration>,
    pub catalogue: Option<CatalogueLocation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstallRequest {
    pub credentials: Credentials,
    pub service: ServiceEntry,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdminRequest {
    pub credentials: Credentials,
    #[serde(default)]
    pub name: String,
}

/// Per-service view of the container handed to every [`Service`] call.
#[derive(Clone)]
pub struct ServiceContext {
    inner: Arc<Inner>,
    service: String,
    timers: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

pub struct ContainerBuilder {
    config: ContainerConfig,
    library: ServiceLibrary,
    operations: Option<Arc<OperationRegistry>>,
    channels: Option<ChannelRegistry>,
    provider: Option<Arc<dyn Provider>>,
    persistence: Option<Arc<dyn PersistenceProvider>>,
    security: Option<Security>,
}

impl ContainerBuilder {
    pub fn library(mut self, library: ServiceLibrary) -> Self {
        self.library = library;
        self
    }

    pub fn operations(mut self, operations: Arc<OperationRegistry>) -> Self {
        self.operations = Some(operations);
        self
    }

    pub fn channels(mut self, channels: ChannelRegistry) -> Self {
        self.channels = Some(channels);
        self
    }

    pub fn provider(mut self, provider: Arc<dyn Provider>) -> Self {
        self.provider = Some(provider);
        self
    }

    /// Overrides `persistence_provider` from the config.
    pub fn persistence(mut self, persistence: Arc<dyn PersistenceProvider>) -> Self {
        self.persistence = Some(persistence);
        self
    }

    /// Overrides `security_provider` from the config.
    pub fn security(mut self, security: Security) -> Self {
        self.security = Some(security);
        self
    }

    pub async fn start(self) -> Result<Container, StartError> {
        let config = self.config;
        config.validate()?;
        if let Some(dup) = config.duplicate_service() {
            return Err(StartError::ServiceLoadFailure {
                name: dup.to_string(),
                reason: "duplicate service name in manifest".into(),
            });
        }
        if let Some(unknown) = config.service_manifest.iter().find(|e| !self.library.contains(&e.name)) {
            return Err(StartError::ServiceLoadFailure {
                name: unknown.name.clone(),
                reason: "no such service".into(),
            });
        }

        // the container probes the host once at startup
        let profile = probe_static();
        let security = match self.security {
            Some(s) => s,
            None => security_from_config(&config)?,
        };
        let persistence = match self.persistence {
            Some(p) => p,
            None => persistence_from_config(&config)?,
        };
        let (hub, restored) = SnapshotHub::open(persistence)?;
        if let Some(snapshot) = &restored {
            tracing::info!(sequence = snapshot.snapshot_sequence, "restored cloud snapshot");
        }

        let listener = TcpListener::bind(&config.listen_endpoint).await.map_err(|e| StartError::BindFailure {
            endpoint: config.listen_endpoint.clone(),
            reason: e.to_string(),
        })?;
        let endpoint = listener
            .local_addr()
            .map_err(|e| StartError::BindFailure { endpoint: config.listen_endpoint.clone(), reason: e.to_string() })?
            .to_string();

        let env = Arc::new(Environment {
            security,
            channels: self.channels.unwrap_or_else(ChannelRegistry::with_builtins),
            operations: self.operations.unwrap_or_else(|| Arc::new(OperationRegistry::with_builtins())),
            hub: Arc::new(hub),
            restored,
            sampler: Arc::new(DynamicSampler::new(profile)),
            provider: self.provider,
            config: config.clone(),
        });
        let (stopped, _) = watch::channel(false);
        let inner = Arc::new(Inner {
            node_id: config.node_id,
            endpoint: endpoint.clone(),
            library: self.library,
            services: Mutex::new(Vec::new()),
            peers: RwLock::new(HashMap::new()),
            catalogue: RwLock::new(None),
            tasks: Mutex::new(Vec::new()),
            stopped,
            shutting_down: AtomicBool::new(false),
            admin: tokio::sync::Mutex::new(()),
            heartbeat_sequence: AtomicU64::new(0),
            env,
        });
        let container = Container { inner };
        if config.service("directory").is_some() {
            container.set_catalogue(Some(CatalogueLocation { node_id: config.node_id, endpoint: endpoint.clone() }));
        }

        for entry in &config.service_manifest {
            if let Err(reason) = container.load_and_start(entry).await {
                tracing::error!(service = %entry.name, %reason, "startup aborted");
                container.stop_services().await;
                container.abort_tasks();
                return Err(StartError::ServiceLoadFailure { name: entry.name.clone(), reason });
            }
        }

        container.spawn_task(accept_loop(container.clone(), listener));
        if config.directory_client {
            container.spawn_task(membership_loop(container.clone()));
        }
        container.spawn_task(snapshot_loop(container.clone()));
        if config.ttl_seconds > 0 {
            let c = container.clone();
            let ttl = Duration::from_secs(config.ttl_seconds);
            container.spawn_task(async move {
                tokio::time::sleep(ttl).await;
                tracing::info!("ttl reached, decommissioning");
                let c2 = c.clone();
                tokio::spawn(async move { c2.shutdown().await });
            });
        }
        tracing::info!(node = %config.node_id, %endpoint, "container started");
        Ok(container)
    }
}

fn security_from_config(config: &ContainerConfig) -> Result<Security, StartError> {
    match config.security_provider.as_str() {
        "anonymous" => Ok(Security::anonymous()),
        "token" => {
            let path = config.credential_file.as_ref().ok_or_else(|| StartError::ServiceLoadFailure {
                name: "security".into(),
                reason: "token provider needs credential_file".into(),
            })?;
            let provider = TokenProvider::load(path)
                .map_err(|reason| StartError::ServiceLoadFailure { name: "security".into(), reason })?;
            Ok(Security::new(Arc::new(provider)))
        }
        other => Err(StartError::ServiceLoadFailure {
            name: "security".into(),
            reason: format!("unknown security provider {other:?}"),
        }),
    }
}

fn persistence_from_config(config: &ContainerConfig) -> Result<Arc<dyn PersistenceProvider>, StartError> {
    match config.persistence_provider.as_str() {
        "volatile" => Ok(Arc::new(VolatileStore::new())),
        "durable" => {
            let dir = config.persistence_dir.clone().unwrap_or_else(|| {
                std::env::temp_dir().join(format!("cirrus-state-{}", config.node_id))
            });
            Ok(Arc::new(DurableStore::open(dir)?))
        }
        other => Err(StartError::ServiceLoadFailure {
            name: "persistence".into(),
            reason: format!("unknown persistence provider {other:?}"),
        }),
    }
}

impl Container {
    pub fn builder(config: ContainerConfig) -> ContainerBuilder {
        ContainerBuilder {
            config,
            library: ServiceLibrary::builtin(),
            operations: None,
            channels: None,
            provider: None,
            persistence: None,
            security: None,
        }
    }

    pub async fn start(config: ContainerConfig) -> Result<Container, StartError> {
        Self::builder(config).start().await
    }

    pub fn node_id(&self) -> NodeId {
        self.inner.node_id
    }

    pub fn endpoint(&self) -> &str {
        &self.inner.endpoint
    }

    pub fn env(&self) -> &Arc<Environment> {
        &self.inner.env
    }

    pub fn config(&self) -> &ContainerConfig {
        &self.inner.env.config
    }

    pub fn is_shutting_down(&self) -> bool {
        self.inner.shutting_down.load(Ordering::SeqCst)
    }

    /// Registration table in start order.
    pub fn registrations(&self) -> Vec<ServiceRegistration> {
        self.inner
            .services
            .lock()
            .expect("services poisoned")
            .iter()
            .map(|s| ServiceRegistration { name: s.name.clone(), state: s.state })
            .collect()
    }

    /// Names of started services; this is what heartbeats advertise.
    pub fn live_services(&self) -> Vec<String> {
        self.registrations()
            .into_iter()
            .filter(|r| r.state == ServiceState::Started)
            .map(|r| r.name)
            .collect()
    }

    pub fn catalogue(&self) -> Option<CatalogueLocation> {
        self.inner.catalogue.read().expect("catalogue poisoned").clone()
    }

    pub fn set_catalogue(&self, location: Option<CatalogueLocation>) {
        if let Some(loc) = &location {
            self.learn_peer(loc.node_id, &loc.endpoint);
        }
        *self.inner.catalogue.write().expect("catalogue poisoned") = location;
    }

    pub fn learn_peer(&self, node: NodeId, endpoint: &str) {
        if node == self.inner.node_id || node.is_nil() {
            return;
        }
        self.inner.peers.write().expect("peers poisoned").insert(node, endpoint.to_string());
    }

    pub fn peer_endpoint(&self, node: NodeId) -> Option<String> {
        self.inner.peers.read().expect("peers poisoned").get(&node).cloned()
    }

    pub fn dispatch_timeout(&self) -> Duration {
        Duration::from_millis(self.config().dispatch_timeout_ms)
    }

    fn spawn_task<F>(&self, fut: F)
    where
        F: Future<Output = ()> + Send + 'static,
    {
        let handle = tokio::spawn(fut);
        let mut tasks = self.inner.tasks.lock().expect("tasks poisoned");
        tasks.retain(|t| !t.is_finished());
        tasks.push(handle);
    }

    fn abort_tasks(&self) {
        for t in self.inner.tasks.lock().expect("tasks poisoned").drain(..) {
            t.abort();
        }
    }

    fn context(&self, service: &str, timers: Arc<Mutex<Vec<JoinHandle<()>>>>) -> ServiceContext {
        ServiceContext { inner: self.inner.clone(), service: service.to_string(), timers }
    }

    async fn load_and_start(&self, entry: &ServiceEntry) -> Result<ServiceRegistration, String> {
        let mut service = self.inner.library.create(entry, &self.inner.env)?;
        let timers = Arc::new(Mutex::new(Vec::new()));
        let ctx = self.context(&entry.name, timers.clone());
        service.start(&ctx).await.map_err(|e| e.to_string())?;
        let (tx, rx) = mpsc::unbounded_channel();
        let task = tokio::spawn(run_service(service, ctx, rx));
        self.inner.services.lock().expect("services poisoned").push(ServiceSlot {
            name: entry.name.clone(),
            state: ServiceState::Started,
            mailbox: tx,
            task,
            timers,
        });
        Ok(ServiceRegistration { name: entry.name.clone(), state: ServiceState::Started })
    }

    /// Stop every service in reverse start order.
    async fn stop_services(&self) {
        let names: Vec<String> = self.registrations().into_iter().rev().map(|r| r.name).collect();
        for name in names {
            let deadline = Instant::now() + Duration::from_millis(self.config().drain_timeout_ms);
            if let Err(e) = self.remove_service(&name, deadline, true).await {
                tracing::warn!(service = %name, error = %e, "forced stop");
            }
        }
    }

    async fn remove_service(&self, name: &str, deadline: Instant, force: bool) -> Result<(), InstallError> {
        let (mailbox, timers) = {
            let services = self.inner.services.lock().expect("services poisoned");
            let slot = services
                .iter()
                .find(|s| s.name == name)
                .ok_or_else(|| InstallError::NotInstalled(name.to_string()))?;
            (slot.mailbox.clone(), slot.timers.clone())
        };
        let (tx, rx) = oneshot::channel();
        let drained = if mailbox.send(Mail::Drain(deadline, tx)).is_ok() {
            match tokio::time::timeout_at(deadline + Duration::from_millis(50), rx).await {
                Ok(Ok(Ok(()))) => true,
                Ok(Ok(Err(_))) | Err(_) => false,
                Ok(Err(_)) => true,
            }
        } else {
            true
        };
        if !drained && !force {
            return Err(InstallError::DrainTimeout(name.to_string()));
        }
        for t in timers.lock().expect("timers poisoned").drain(..) {
            t.abort();
        }
        let (tx, rx) = oneshot::channel();
        if mailbox.send(Mail::Stop(tx)).is_ok() {
            let _ = tokio::time::timeout(Duration::from_secs(5), rx).await;
        }
        let mut services = self.inner.services.lock().expect("services poisoned");
        if let Some(pos) = services.iter().position(|s| s.name == name) {
            let slot = services.remove(pos);
            slot.task.abort();
        }
        if !drained {
            return Err(InstallError::DrainTimeout(name.to_string()));
        }
        Ok(())
    }

    /// Load and start a service from the compiled-in library.
    pub async fn install_service(&self, entry: ServiceEntry) -> Result<ServiceRegistration, InstallError> {
        let _guard = self.inner.admin.lock().await;
        if self.registrations().iter().any(|r| r.name == entry.name) {
            return Err(InstallError::AlreadyInstalled(entry.name));
        }
        if !self.inner.library.contains(&entry.name) {
            return Err(InstallError::LoadFailure { name: entry.name, reason: "no such service".into() });
        }
        if entry.name == "directory" {
            self.set_catalogue(Some(CatalogueLocation {
                node_id: self.node_id(),
                endpoint: self.endpoint().to_string(),
            }));
        }
        self.load_and_start(&entry)
            .await
            .map_err(|reason| InstallError::LoadFailure { name: entry.name.clone(), reason })
    }

    /// Drain and remove a service. A drain that misses the configured window
    /// leaves the service installed.
    pub async fn uninstall_service(&self, name: &str) -> Result<(), InstallError> {
        let _guard = self.inner.admin.lock().await;
        let deadline = Instant::now() + Duration::from_millis(self.config().drain_timeout_ms);
        self.remove_service(name, deadline, false).await
    }

    /// Route an envelope and wait for its single outcome.
    pub async fn dispatch(&self, envelope: ServiceEnvelope) -> Result<ServiceEnvelope, DispatchError> {
        self.dispatch_with_timeout(envelope, self.dispatch_timeout()).await
    }

    pub async fn dispatch_with_timeout(
        &self,
        envelope: ServiceEnvelope,
        timeout: Duration,
    ) -> Result<ServiceEnvelope, DispatchError> {
        let target = envelope.target_node;
        if target.is_nil() || target == self.inner.node_id {
            return tokio::time::timeout(timeout, self.deliver_local(envelope))
                .await
                .map_err(|_| DispatchError::Timeout(timeout));
        }
        let endpoint = self.peer_endpoint(target).ok_or(DispatchError::UnknownNode(target))?;
        send_remote(&endpoint, &envelope, timeout).await
    }

    /// Request/reply to a service on `node` (nil or self for local).
    pub async fn call(&self, node: NodeId, service: &str, kind: &str, payload: Vec<u8>) -> Result<Vec<u8>, CallError> {
        let env = ServiceEnvelope::request(self.inner.node_id, node, service, kind, payload);
        into_payload(self.dispatch(env).await?)
    }

    /// Request/reply to whichever container listens at `endpoint`.
    pub async fn call_endpoint(
        &self,
        endpoint: &str,
        service: &str,
        kind: &str,
        payload: Vec<u8>,
        timeout: Duration,
    ) -> Result<Vec<u8>, CallError> {
        if endpoint == self.inner.endpoint {
            let env = ServiceEnvelope::request(self.inner.node_id, NodeId::nil(), service, kind, payload);
            return into_payload(self.dispatch_with_timeout(env, timeout).await?);
        }
        let env = ServiceEnvelope::request(self.inner.node_id, NodeId::nil(), service, kind, payload);
        into_payload(send_remote(endpoint, &env, timeout).await?)
    }

    async fn deliver_local(&self, envelope: ServiceEnvelope) -> ServiceEnvelope {
        let me = self.inner.node_id;
        if envelope.target_service == CONTAINER_SERVICE {
            return match self.handle_container_verb(&envelope).await {
                Ok(reply) => envelope.reply(me, reply.kind, reply.payload),
                Err(e) => envelope.error_reply(me, &e),
            };
        }
        let mailbox = {
            let services = self.inner.services.lock().expect("services poisoned");
            services
                .iter()
                .find(|s| s.name == envelope.target_service && s.state == ServiceState::Started)
                .map(|s| s.mailbox.clone())
        };
        let Some(mailbox) = mailbox else {
            let err = WireError::new("UnknownService", envelope.target_service.clone());
            return envelope.error_reply(me, &err);
        };
        let (tx, rx) = oneshot::channel();
        if mailbox.send(Mail::Request(envelope.clone(), tx)).is_err() {
            return envelope.error_reply(me, &WireError::new("UnknownService", envelope.target_service.clone()));
        }
        match rx.await {
            Ok(Ok(reply)) => envelope.reply(me, reply.kind, reply.payload),
            Ok(Err(e)) => envelope.error_reply(me, &e),
            Err(_) => {
                self.mark_failed(&envelope.target_service);
                envelope.error_reply(me, &WireError::new("ServiceFailed", envelope.target_service.clone()))
            }
        }
    }

    fn mark_failed(&self, name: &str) {
        let mut services = self.inner.services.lock().expect("services poisoned");
        if let Some(slot) = services.iter_mut().find(|s| s.name == name) {
            slot.state = ServiceState::Failed;
        }
    }

    pub fn info(&self) -> ContainerInfo {
        ContainerInfo {
            node_id: self.node_id(),
            name: self.config().display_name(),
            endpoint: self.endpoint().to_string(),
            services: self.registrations(),
            catalogue: self.catalogue(),
        }
    }

    async fn handle_container_verb(&self, env: &ServiceEnvelope) -> Result<Reply, WireError> {
        let security = &self.inner.env.security;
        let admin = |creds: &Credentials, what: &str| {
            security
                .check(creds, Action::Admin, what)
                .map_err(|_| WireError::new("Unauthorized", "admin rights required"))
        };
        match env.kind.as_str() {
            "container.ping" => Ok(Reply::json("container.info", &self.info())),
            "container.locate" => Ok(Reply::json("container.located", &self.catalogue())),
            "container.install" => {
                let req: InstallRequest = decode(&env.payload)?;
                admin(&req.credentials, "container/install")?;
                let reg = self.install_service(req.service).await?;
                Ok(Reply::json("container.installed", &reg))
            }
            "container.uninstall" => {
                let req: AdminRequest = decode(&env.payload)?;
                admin(&req.credentials, "container/uninstall")?;
                self.uninstall_service(&req.name).await?;
                Ok(Reply::ack())
            }
            "container.shutdown" => {
                let req: AdminRequest = decode(&env.payload)?;
                admin(&req.credentials, "container/shutdown")?;
                let c = self.clone();
                tokio::spawn(async move { c.shutdown().await });
                Ok(Reply::ack())
            }
            _ => Err(super::service::unknown_kind(env)),
        }
    }

    /// Leave the catalogue, drain and stop services, persist, and close.
    // Boxed so the container verb handler, which spawns a shutdown, has a
    // nameable Send future.
    pub fn shutdown(&self) -> std::pin::Pin<Box<dyn std::future::Future<Output = ()> + Send + '_>> {
        Box::pin(self.shutdown_inner())
    }

    async fn shutdown_inner(&self) {
        if self.inner.shutting_down.swap(true, Ordering::SeqCst) {
            let _ = self.wait_stopped().await;
            return;
        }
        if self.config().directory_client {
            if let Some(cat) = self.catalogue() {
                let payload = encode(&directory::LeaveRequest { node_id: self.node_id() });
                let _ = self
                    .call_endpoint(&cat.endpoint, "directory", "dir.leave", payload, Duration::from_secs(2))
                    .await;
            }
        }
        self.stop_services().await;
        if let Err(e) = self.inner.env.hub.persist_if_dirty() {
            tracing::warn!(error = %e, "final snapshot failed");
        }
        self.abort_tasks();
        let _ = self.inner.stopped.send(true);
        tracing::info!(node = %self.node_id(), "container stopped");
    }

    /// Simulate a crash: abort everything without leaving or persisting.
    pub fn kill(&self) {
        self.inner.shutting_down.store(true, Ordering::SeqCst);
        let slots: Vec<ServiceSlot> = self.inner.services.lock().expect("services poisoned").drain(..).collect();
        for slot in slots {
            for t in slot.timers.lock().expect("timers poisoned").drain(..) {
                t.abort();
            }
            slot.task.abort();
        }
        self.abort_tasks();
        let _ = self.inner.stopped.send(true);
    }

    pub fn is_stopped(&self) -> bool {
        *self.inner.stopped.borrow()
    }

    pub async fn wait_stopped(&self) {
        let mut rx = self.inner.stopped.subscribe();
        while !*rx.borrow_and_update() {
            if rx.changed().await.is_err() {
                return;
            }
        }
    }

    /// The record this node registers with.
    pub fn membership_record(&self) -> MembershipRecord {
        let env = &self.inner.env;
        MembershipRecord {
            node_id: self.node_id(),
            name: self.config().display_name(),
            endpoint: self.endpoint().to_string(),
            services: self.live_services(),
            executor_slots: self.executor_slots(),
            static_profile: env.sampler.profile().clone(),
            last_stats: env.sampler.sample(),
            last_heartbeat_at: now_ms(),
            state: directory::LivenessState::Alive,
            last_sequence: 0,
        }
    }

    fn executor_slots(&self) -> u32 {
        if !self.live_services().iter().any(|s| s == "executor") {
            return 0;
        }
        crate::execution::executor_slots(
            self.config().service("executor"),
            self.inner.env.sampler.profile(),
        )
    }

    fn next_heartbeat(&self) -> Heartbeat {
        Heartbeat {
            node_id: self.node_id(),
            services: self.live_services(),
            stats: self.inner.env.sampler.sample(),
            sequence: self.inner.heartbeat_sequence.fetch_add(1, Ordering::SeqCst) + 1,
            executor_slots: self.executor_slots(),
        }
    }
}

fn into_payload(reply: ServiceEnvelope) -> Result<Vec<u8>, CallError> {
    if reply.is_error() {
        let err: WireError = serde_json::from_slice(&reply.payload)
            .unwrap_or_else(|_| WireError::new("Malformed", "unreadable error reply"));
        Err(CallError::Remote(err))
    } else {
        Ok(reply.payload)
    }
}

/// Send one envelope over a fresh connection and wait for its reply.
/// Connection attempts are retried until the deadline.
pub async fn send_remote(
    endpoint: &str,
    envelope: &ServiceEnvelope,
    timeout: Duration,
) -> Result<ServiceEnvelope, DispatchError> {
    let attempt = async {
        let mut backoff = Duration::from_millis(10);
        let mut stream = loop {
            match TcpStream::connect(endpoint).await {
                Ok(s) => break s,
                Err(e) => {
                    tracing::trace!(%endpoint, error = %e, "connect failed, retrying");
                    tokio::time::sleep(backoff).await;
                    backoff = (backoff * 2).min(Duration::from_millis(250));
                }
            }
        };
        let _ = stream.set_nodelay(true);
        send_envelope(&mut stream, envelope).await.map_err(|e| DispatchError::Protocol(e.to_string()))?;
        let reply = recv_envelope(&mut stream).await.map_err(|e| DispatchError::Protocol(e.to_string()))?;
        if reply.reply_to != Some(envelope.message_id) {
            return Err(DispatchError::Protocol("reply does not correlate with request".into()));
        }
        Ok(reply)
    };
    tokio::time::timeout(timeout, attempt).await.map_err(|_| DispatchError::Timeout(timeout))?
}

/// Typed request/reply over any container.
pub async fn call_json<Req: Serialize, Resp: DeserializeOwned>(
    container: &Container,
    node: NodeId,
    service: &str,
    kind: &str,
    request: &Req,
) -> Result<Resp, CallError> {
    let bytes = container.call(node, service, kind, encode(request)).await?;
    serde_json::from_slice(&bytes).map_err(|e| CallError::Remote(WireError::new("Malformed", e.to_string())))
}

async fn run_service(mut service: Box<dyn Service>, ctx: ServiceContext, mut rx: mpsc::UnboundedReceiver<Mail>) {
    while let Some(mail) = rx.recv().await {
        match mail {
            Mail::Request(env, reply) => {
                let result = service.handle(&ctx, env).await;
                let _ = reply.send(result);
            }
            Mail::Drain(deadline, done) => {
                let result = service.drain(&ctx, deadline).await;
                let _ = done.send(result);
            }
            Mail::Stop(done) => {
                service.stop(&ctx).await;
                let _ = done.send(());
                break;
            }
        }
    }
}

async fn accept_loop(container: Container, listener: TcpListener) {
    loop {
        let (stream, _) = match listener.accept().await {
            Ok(s) => s,
            Err(e) => {
                tracing::warn!(error = %e, "accept failed");
                tokio::time::sleep(Duration::from_millis(50)).await;
                continue;
            }
        };
        let c = container.clone();
        container.spawn_task(async move { serve_connection(c, stream).await });
    }
}

async fn serve_connection(container: Container, mut stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    loop {
        let envelope = match recv_envelope(&mut stream).await {
            Ok(env) => env,
            Err(FrameError::Closed) => return,
            Err(e) => {
                tracing::debug!(error = %e, "dropping connection");
                return;
            }
        };
        let me = container.node_id();
        let reply = if envelope.target_node.is_nil() || envelope.target_node == me {
            container.deliver_local(envelope).await
        } else {
            match container.dispatch(envelope.clone()).await {
                Ok(reply) => reply,
                Err(e) => envelope.error_reply(me, &WireError::from(CallError::Dispatch(e))),
            }
        };
        if send_envelope(&mut stream, &reply).await.is_err() {
            return;
        }
    }
}

/// Contact seeds in order; the first that knows the catalogue wins.
pub async fn discover(
    container: &Container,
    seeds: &[String],
    per_seed_timeout: Duration,
) -> Result<CatalogueLocation, directory::DiscoveryError> {
    for seed in seeds {
        match container
            .call_endpoint(seed, CONTAINER_SERVICE, "container.locate", Vec::new(), per_seed_timeout)
            .await
        {
            Ok(bytes) => {
                if let Ok(Some(location)) = serde_json::from_slice::<Option<CatalogueLocation>>(&bytes) {
                    return Ok(location);
                }
            }
            Err(e) => tracing::debug!(%seed, error = %e, "seed did not answer"),
        }
    }
    Err(directory::DiscoveryError::NoSeedReachable(seeds.to_vec()))
}

/// Register, then heartbeat every interval. While the catalogue is
/// unreachable, seeds are re-contacted every ten intervals.
async fn membership_loop(container: Container) {
    let interval = Duration::from_millis(container.config().heartbeat_interval_ms);
    let rediscover_every = 10u32;
    let mut registered = false;
    let mut failures = 0u32;
    let mut ticker = tokio::time::interval(interval);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        ticker.tick().await;
        if container.is_shutting_down() {
            return;
        }
        let hosts_directory = container.live_services().iter().any(|s| s == "directory");
        if hosts_directory {
            container.set_catalogue(Some(CatalogueLocation {
                node_id: container.node_id(),
                endpoint: container.endpoint().to_string(),
            }));
        }
        let catalogue = match container.catalogue() {
            Some(c) => c,
            None => {
                if failures % rediscover_every == 0 {
                    match discover(&container, &container.config().seed_peers, interval).await {
                        Ok(loc) => {
                            container.set_catalogue(Some(loc.clone()));
                            registered = false;
                            loc
                        }
                        Err(_) => {
                            failures += 1;
                            continue;
                        }
                    }
                } else {
                    failures += 1;
                    continue;
                }
            }
        };

        let outcome = if registered {
            let hb = container.next_heartbeat();
            container
                .call_endpoint(&catalogue.endpoint, "directory", "dir.heartbeat", encode(&hb), interval)
                .await
                .map(|_| ())
        } else {
            let record = container.membership_record();
            container
                .call_endpoint(&catalogue.endpoint, "directory", "dir.register", encode(&record), interval)
                .await
                .map(|_| ())
        };
        match outcome {
            Ok(()) => {
                if !registered {
                    tracing::debug!(node = %container.node_id(), "registered with catalogue");
                }
                registered = true;
                failures = 0;
            }
            Err(CallError::Remote(w)) if w.code == "UnknownNode" => registered = false,
            Err(CallError::Remote(w)) if w.code == "LicenseRejected" => {
                tracing::warn!("membership rejected by license");
                registered = false;
                failures += 1;
            }
            Err(CallError::Remote(w)) if w.code == "StaleHeartbeat" => {}
            Err(e) => {
                failures += 1;
                tracing::debug!(error = %e, failures, "catalogue unreachable");
                if failures % rediscover_every == 0 && !hosts_directory {
                    container.set_catalogue(None);
                    registered = false;
                    failures = 0;
                }
            }
        }
    }
}

async fn snapshot_loop(container: Container) {
    let mut ticker = tokio::time::interval(SNAPSHOT_PERIOD);
    ticker.tick().await;
    loop {
        ticker.tick().await;
        if let Err(e) = container.env().hub.persist_if_dirty() {
            tracing::warn!(error = %e, "periodic snapshot failed");
        }
    }
}

impl ServiceContext {
    pub fn container(&self) -> Container {
        Container { inner: self.inner.clone() }
    }

    pub fn service_name(&self) -> &str {
        &self.service
    }

    pub fn node_id(&self) -> NodeId {
        self.inner.node_id
    }

    pub fn endpoint(&self) -> &str {
        &self.inner.endpoint
    }

    pub fn env(&self) -> &Arc<Environment> {
        &self.inner.env
    }

    pub fn config(&self) -> &ContainerConfig {
        &self.inner.env.config
    }

    pub fn is_shutting_down(&self) -> bool {
        self.inner.shutting_down.load(Ordering::SeqCst)
    }

    pub async fn call_local(&self, service: &str, kind: &str, payload: Vec<u8>) -> Result<Vec<u8>, CallError> {
        self.container().call(NodeId::nil(), service, kind, payload).await
    }

    pub async fn call_node(&self, node: NodeId, service: &str, kind: &str, payload: Vec<u8>) -> Result<Vec<u8>, CallError> {
        self.container().call(node, service, kind, payload).await
    }

    pub async fn call_endpoint(
        &self,
        endpoint: &str,
        service: &str,
        kind: &str,
        payload: Vec<u8>,
    ) -> Result<Vec<u8>, CallError> {
        let timeout = self.container().dispatch_timeout();
        self.container().call_endpoint(endpoint, service, kind, payload, timeout).await
    }

    pub fn learn_peer(&self, node: NodeId, endpoint: &str) {
        self.container().learn_peer(node, endpoint)
    }

    pub fn catalogue(&self) -> Option<CatalogueLocation> {
        self.container().catalogue()
    }

    /// Deliver an envelope of `kind` to this service every `period`. A tick
    /// is not sent until the previous one has been handled.
    pub fn every(&self, period: Duration, kind: &str) {
        let inner = self.inner.clone();
        let service = self.service.clone();
        let kind = kind.to_string();
        let handle = tokio::spawn(async move {
            let mut ticker = tokio::time::interval(period);
            ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                ticker.tick().await;
                let mailbox = {
                    let services = inner.services.lock().expect("services poisoned");
                    services.iter().find(|s| s.name == service).map(|s| s.mailbox.clone())
                };
                let Some(mailbox) = mailbox else { continue };
                let env = ServiceEnvelope::request(inner.node_id, inner.node_id, &service, &kind, Vec::new());
                let (tx, rx) = oneshot::channel();
                if mailbox.send(Mail::Request(env, tx)).is_err() {
                    return;
                }
                let _ = rx.await;
            }
        });
        self.timers.lock().expect("timers poisoned").push(handle);
    }

    /// Send a message to this same service without waiting for it.
    pub fn notify_self(&self, kind: &str, payload: Vec<u8>) {
        let ctx = self.clone();
        let kind = kind.to_string();
        tokio::spawn(async move {
            let _ = ctx.call_local(&ctx.service, &kind, payload).await;
        });
    }

    /// Run a background task owned by the container.
    pub fn spawn<F>(&self, fut: F)
    where
        F: Future<Output = ()> + Send + 'static,
    {
        self.container().spawn_task(fut)
    }
}
