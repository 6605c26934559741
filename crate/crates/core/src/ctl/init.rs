//! Config files for a local cloud: one master plus workers.

use std::path::{Path, PathBuf};

use crate::appmodel::ClientConfig;
use crate::container::{ContainerConfig, ServiceEntry};
use crate::ids::NodeId;
use crate::transversal::{Role, TokenProvider};

#[derive(Debug, Clone)]
pub struct InitOptions {
    /// Total nodes including the master.
    pub nodes: u32,
    pub host: String,
    pub base_port: u16,
    pub http_port: u16,
    pub storage_port: u16,
    pub slots_per_worker: u32,
    pub heartbeat_interval_ms: u64,
    pub license_max_nodes: u32,
    pub durable: bool,
    /// When set, nodes use token security and an `admin` user with this token.
    pub admin_token: Option<String>,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            nodes: 2,
            host: "127.0.0.1".into(),
            base_port: 7000,
            http_port: 7080,
            storage_port: 7100,
            slots_per_worker: 2,
            heartbeat_interval_ms: 1000,
            license_max_nodes: 0,
            durable: true,
            admin_token: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InitLayout {
    pub master: PathBuf,
    pub workers: Vec<PathBuf>,
    pub client: PathBuf,
    pub credentials: Option<PathBuf>,
}

/// The master hosts the directory, reservation, scheduler, storage and HTTP
/// services. Workers host an executor each. A single-node cloud puts the
/// executor on the master.
pub fn cloud_configs(dir: &Path, opts: &InitOptions) -> Vec<ContainerConfig> {
    let master_endpoint = format!("{}:{}", opts.host, opts.base_port);
    let base = |name: &str, port: u16| {
        let mut c = ContainerConfig {
            node_id: NodeId::new(),
            name: name.to_string(),
            listen_endpoint: format!("{}:{port}", opts.host),
            seed_peers: vec![master_endpoint.clone()],
            heartbeat_interval_ms: opts.heartbeat_interval_ms,
            license_max_nodes: opts.license_max_nodes,
            work_dir: Some(dir.join("work").join(name)),
            ..ContainerConfig::default()
        };
        if opts.durable {
            c.persistence_provider = "durable".into();
            c.persistence_dir = Some(dir.join("state").join(name));
        }
        if opts.admin_token.is_some() {
            c.security_provider = "token".into();
            c.credential_file = Some(dir.join("credentials"));
        }
        c
    };
    let mut master = base("master", opts.base_port);
    master.seed_peers.clear();
    master.service_manifest = vec![
        ServiceEntry::new("directory"),
        ServiceEntry::new("reservation"),
        ServiceEntry::new("scheduler"),
        ServiceEntry::new("storage")
            .with("listen", format!("{}:{}", opts.host, opts.storage_port))
            .with("root", dir.join("storage").to_string_lossy().into_owned()),
        ServiceEntry::new("http").with("listen", format!("{}:{}", opts.host, opts.http_port)),
    ];
    if opts.nodes <= 1 {
        master.service_manifest.push(ServiceEntry::new("executor").with("slots", i64::from(opts.slots_per_worker)));
    }
    let mut all = vec![master];
    for i in 1..opts.nodes.max(1) {
        let mut w = base(&format!("worker-{i}"), opts.base_port + i as u16);
        w.service_manifest = vec![ServiceEntry::new("executor").with("slots", i64::from(opts.slots_per_worker))];
        all.push(w);
    }
    all
}

/// Write `master.toml`, `worker-<i>.toml`, `client.toml` and, with token
/// security, `credentials`.
pub fn init_cloud(dir: &Path, opts: &InitOptions) -> std::io::Result<InitLayout> {
    std::fs::create_dir_all(dir)?;
    let configs = cloud_configs(dir, opts);
    let mut paths = Vec::new();
    for c in &configs {
        let path = dir.join(format!("{}.toml", c.name));
        c.save(&path)?;
        paths.push(path);
    }
    let credentials = match &opts.admin_token {
        Some(token) => {
            let path = dir.join("credentials");
            std::fs::write(&path, TokenProvider::file_line("admin", token, &[Role::Admin, Role::User]) + "\n")?;
            Some(path)
        }
        None => None,
    };
    let client = ClientConfig {
        master: configs[0].listen_endpoint.clone(),
        user: if opts.admin_token.is_some() { "admin".into() } else { "anonymous".into() },
        token: opts.admin_token.clone().unwrap_or_default(),
        channels: vec![format!("aftp://{}:{}/data", opts.host, opts.storage_port)],
        timeout_ms: 10_000,
    };
    let client_path = dir.join("client.toml");
    std::fs::write(&client_path, toml::to_string(&client).expect("client config serializes"))?;
    let master = paths.remove(0);
    Ok(InitLayout { master, workers: paths, client: client_path, credentials })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_nodes_give_master_and_three_workers() {
        let dir = tempfile::tempdir().unwrap();
        let layout = init_cloud(dir.path(), &InitOptions { nodes: 4, ..Default::default() }).unwrap();
        assert_eq!(layout.workers.len(), 3);
        let master = ContainerConfig::load(&layout.master).unwrap();
        assert!(master.service("directory").is_some());
        assert!(master.service("executor").is_none());
        let w = ContainerConfig::load(&layout.workers[2]).unwrap();
        assert_eq!(w.seed_peers, vec![master.listen_endpoint.clone()]);
        assert_eq!(w.service("executor").unwrap().opt_u64("slots"), Some(2));
        let client = ClientConfig::parse(&std::fs::read_to_string(layout.client).unwrap()).unwrap();
        assert_eq!(client.master, master.listen_endpoint);
    }

    #[test]
    fn token_security_writes_a_loadable_credential_file() {
        let dir = tempfile::tempdir().unwrap();
        let layout =
            init_cloud(dir.path(), &InitOptions { nodes: 1, admin_token: Some("s3cret".into()), ..Default::default() })
                .unwrap();
        let provider = TokenProvider::load(layout.credentials.as_ref().unwrap()).unwrap();
        use crate::transversal::SecurityProvider;
        assert!(provider.authenticate(&crate::transversal::Credentials::new("admin", "s3cret")).is_ok());
        let master = ContainerConfig::load(&layout.master).unwrap();
        assert!(master.service("executor").is_some());
    }
}
