//! In-process clouds for integration tests.
#![allow(dead_code)]

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use cirrus_core::container::{Container, ContainerConfig, ServiceEntry};
use cirrus_core::directory::{query_catalogue, LivenessState, MembershipRecord};
use cirrus_core::storage::{DataChannelSpec, KIND_SPEC};
use cirrus_core::transversal::Credentials;
use cirrus_core::{CloudClient, NodeId};
use tempfile::TempDir;

#[derive(Debug, Clone)]
pub struct CloudOptions {
    pub workers: usize,
    pub slots: u32,
    pub heartbeat_ms: u64,
    pub license_max_nodes: u32,
    pub durable: bool,
    /// Master hosts storage and HTTP too.
    pub storage: bool,
    pub http: bool,
    pub tick_ms: u64,
}

impl Default for CloudOptions {
    fn default() -> Self {
        Self {
            workers: 2,
            slots: 2,
            heartbeat_ms: 200,
            license_max_nodes: 0,
            durable: false,
            storage: true,
            http: false,
            tick_ms: 50,
        }
    }
}

pub struct Cloud {
    pub dir: TempDir,
    pub opts: CloudOptions,
    pub master_config: ContainerConfig,
    pub master: Container,
    pub workers: Vec<Container>,
    pub client: CloudClient,
}

/// A port nobody is listening on right now.
pub fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

pub fn master_config(dir: &Path, opts: &CloudOptions) -> ContainerConfig {
    let mut services = vec![
        ServiceEntry::new("directory"),
        ServiceEntry::new("reservation").with("tick_ms", 200i64),
        ServiceEntry::new("scheduler").with("tick_ms", opts.tick_ms as i64),
    ];
    if opts.storage {
        services.push(
            ServiceEntry::new("storage")
                .with("listen", "127.0.0.1:0")
                .with("root", dir.join("storage").to_string_lossy().into_owned()),
        );
    }
    if opts.http {
        services.push(ServiceEntry::new("http").with("listen", "127.0.0.1:0"));
    }
    let mut c = ContainerConfig {
        name: "master".into(),
        listen_endpoint: format!("127.0.0.1:{}", free_port()),
        heartbeat_interval_ms: opts.heartbeat_ms,
        license_max_nodes: opts.license_max_nodes,
        work_dir: Some(dir.join("work/master")),
        service_manifest: services,
        ..ContainerConfig::default()
    };
    if opts.durable {
        c.persistence_provider = "durable".into();
        c.persistence_dir = Some(dir.join("state/master"));
    }
    c
}

pub fn worker_config(dir: &Path, name: &str, master: &str, opts: &CloudOptions) -> ContainerConfig {
    ContainerConfig {
        name: name.into(),
        listen_endpoint: "127.0.0.1:0".into(),
        seed_peers: vec![master.to_string()],
        heartbeat_interval_ms: opts.heartbeat_ms,
        work_dir: Some(dir.join("work").join(name)),
        service_manifest: vec![ServiceEntry::new("executor").with("slots", i64::from(opts.slots))],
        ..ContainerConfig::default()
    }
}

impl Cloud {
    pub async fn start(opts: CloudOptions) -> Cloud {
        let dir = tempfile::tempdir().unwrap();
        let master_config = master_config(dir.path(), &opts);
        let master = Container::start(master_config.clone()).await.expect("master starts");
        let client = CloudClient::new(master.endpoint().to_string(), Credentials::anonymous());
        let mut cloud = Cloud { dir, opts, master_config, master, workers: Vec::new(), client };
        for _ in 0..cloud.opts.workers {
            cloud.add_worker().await;
        }
        cloud.wait_alive(cloud.opts.workers + 1, Duration::from_secs(5)).await;
        cloud.wait_executor_slots(Duration::from_secs(5)).await;
        cloud
    }

    pub async fn add_worker(&mut self) -> Container {
        let name = format!("worker-{}", self.workers.len() + 1);
        let config = worker_config(self.dir.path(), &name, self.master.endpoint(), &self.opts);
        let worker = Container::start(config).await.expect("worker starts");
        self.workers.push(worker.clone());
        worker
    }

    pub fn path(&self) -> PathBuf {
        self.dir.path().to_path_buf()
    }

    pub async fn records(&self) -> Vec<MembershipRecord> {
        query_catalogue(&self.master, None).await.unwrap_or_default()
    }

    pub async fn alive(&self) -> usize {
        self.records().await.iter().filter(|r| r.state == LivenessState::Alive).count()
    }

    pub async fn wait_alive(&self, n: usize, timeout: Duration) {
        let deadline = tokio::time::Instant::now() + timeout;
        while self.alive().await < n {
            assert!(tokio::time::Instant::now() < deadline, "cloud did not reach {n} alive nodes");
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    }

    /// Wait until the scheduler knows every executor slot.
    pub async fn wait_executor_slots(&self, timeout: Duration) {
        let want = self.workers.len() as u32 * self.opts.slots;
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let stats = self.client.scheduler_stats().await.expect("stats");
            let have: u32 = stats.executors.iter().map(|e| e.slots_total).sum();
            if have >= want {
                return;
            }
            assert!(tokio::time::Instant::now() < deadline, "scheduler saw {have} of {want} slots");
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    }

    pub async fn storage_spec(&self) -> DataChannelSpec {
        self.client.call("storage", KIND_SPEC, &()).await.expect("storage spec")
    }

    pub fn worker_ids(&self) -> Vec<NodeId> {
        self.workers.iter().map(|w| w.node_id()).collect()
    }

    pub async fn stop(self) {
        for w in &self.workers {
            w.shutdown().await;
        }
        self.master.shutdown().await;
    }
}

/// Upload `files` through a channel client, off the async runtime.
pub async fn upload(spec: &DataChannelSpec, files: Vec<(String, Vec<u8>)>) -> Vec<cirrus_core::storage::FileDescriptor> {
    let spec = spec.clone();
    tokio::task::spawn_blocking(move || {
        let client = cirrus_core::storage::ChannelRegistry::with_builtins().client(&spec).unwrap();
        files.iter().map(|(n, b)| client.put(n, b).unwrap()).collect()
    })
    .await
    .unwrap()
}

pub async fn download(fd: &cirrus_core::storage::FileDescriptor) -> Vec<u8> {
    let fd = fd.clone();
    tokio::task::spawn_blocking(move || {
        let client = cirrus_core::storage::ChannelRegistry::with_builtins().client(&fd.channel).unwrap();
        client.get(&fd.logical_name).unwrap()
    })
    .await
    .unwrap()
}
