//! Container configuration file (TOML).
//!
//! ```toml
//! node_id = "5f0c...-..."
//! name = "master"
//! listen_endpoint = "127.0.0.1:7000"
//! seed_peers = []
//! security_provider = "anonymous"      # or "token" with credential_file
//! persistence_provider = "durable"     # or "volatile"
//! persistence_dir = "state/master"
//! heartbeat_interval_ms = 1000
//! license_max_nodes = 0
//!
//! [[service]]
//! name = "directory"
//!
//! [[service]]
//! name = "executor"
//! slots = 4
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::NodeId;
use crate::transversal::Tariff;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// One manifest entry: a service name plus its free-form options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceEntry {
    pub name: String,
    #[serde(flatten)]
    pub options: toml::Table,
}

impl ServiceEntry {
    pub fn new(name: &str) -> Self {
        Self { name: name.to_string(), options: toml::Table::new() }
    }

    pub fn with(mut self, key: &str, value: impl Into<toml::Value>) -> Self {
        self.options.insert(key.to_string(), value.into());
        self
    }

    pub fn opt_u64(&self, key: &str) -> Option<u64> {
        self.options.get(key).and_then(|v| v.as_integer()).and_then(|i| u64::try_from(i).ok())
    }

    pub fn opt_str(&self, key: &str) -> Option<&str> {
        self.options.get(key).and_then(|v| v.as_str())
    }

    pub fn opt_bool(&self, key: &str) -> Option<bool> {
        self.options.get(key).and_then(|v| v.as_bool())
    }
}

fn default_provider_security() -> String {
    "anonymous".into()
}
fn default_provider_persistence() -> String {
    "volatile".into()
}
fn default_heartbeat() -> u64 {
    1000
}
fn default_dispatch_timeout() -> u64 {
    10_000
}
fn default_drain_timeout() -> u64 {
    30_000
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerConfig {
    pub node_id: NodeId,
    #[serde(default)]
    pub name: String,
    pub listen_endpoint: String,
    #[serde(default)]
    pub seed_peers: Vec<String>,
    #[serde(default = "default_provider_security")]
    pub security_provider: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credential_file: Option<PathBuf>,
    #[serde(default = "default_provider_persistence")]
    pub persistence_provider: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persistence_dir: Option<PathBuf>,
    #[serde(default = "default_heartbeat")]
    pub heartbeat_interval_ms: u64,
    /// `0` means unlimited. Enforced by the directory service.
    #[serde(default)]
    pub license_max_nodes: u32,
    #[serde(default = "default_dispatch_timeout")]
    pub dispatch_timeout_ms: u64,
    #[serde(default = "default_drain_timeout")]
    pub drain_timeout_ms: u64,
    /// Register with and heartbeat to the catalogue.
    #[serde(default = "default_true")]
    pub directory_client: bool,
    /// Self-decommission after this many seconds; `0` never.
    #[serde(default)]
    pub ttl_seconds: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub work_dir: Option<PathBuf>,
    #[serde(default)]
    pub tariff: Tariff,
    #[serde(default, rename = "service")]
    pub service_manifest: Vec<ServiceEntry>,
}

impl Default for ContainerConfig {
    fn default() -> Self {
        Self {
            node_id: NodeId::new(),
            name: String::new(),
            listen_endpoint: "127.0.0.1:0".into(),
            seed_peers: Vec::new(),
            security_provider: default_provider_security(),
            credential_file: None,
            persistence_provider: default_provider_persistence(),
            persistence_dir: None,
            heartbeat_interval_ms: default_heartbeat(),
            license_max_nodes: 0,
            dispatch_timeout_ms: default_dispatch_timeout(),
            drain_timeout_ms: default_drain_timeout(),
            directory_client: true,
            ttl_seconds: 0,
            work_dir: None,
            tariff: Tariff::default(),
            service_manifest: Vec::new(),
        }
    }
}

impl ContainerConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_toml())
    }

    /// Checks everything except manifest uniqueness, which is a service load
    /// failure at start.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.heartbeat_interval_ms < 100 {
            return Err(ConfigError::Invalid("heartbeat_interval_ms must be at least 100".into()));
        }
        if self.listen_endpoint.is_empty() {
            return Err(ConfigError::Invalid("listen_endpoint is required".into()));
        }
        Ok(())
    }

    /// First name that appears twice in the manifest.
    pub fn duplicate_service(&self) -> Option<&str> {
        let mut seen = HashSet::new();
        self.service_manifest
            .iter()
            .find(|e| !seen.insert(e.name.as_str()))
            .map(|e| e.name.as_str())
    }

    pub fn service(&self, name: &str) -> Option<&ServiceEntry> {
        self.service_manifest.iter().find(|e| e.name == name)
    }

    pub fn with_services(mut self, names: &[&str]) -> Self {
        self.service_manifest = names.iter().map(|n| ServiceEntry::new(n)).collect();
        self
    }

    pub fn display_name(&self) -> String {
        if self.name.is_empty() { self.node_id.to_string() } else { self.name.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_keeps_manifest_order_and_options() {
        let mut cfg = ContainerConfig {
            name: "w1".into(),
            seed_peers: vec!["127.0.0.1:7000".into()],
            ..Default::default()
        };
        cfg.service_manifest = vec![
            ServiceEntry::new("directory"),
            ServiceEntry::new("executor").with("slots", 4).with("retain_workspace", true),
        ];
        let text = cfg.to_toml();
        let back = ContainerConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.service("executor").unwrap().opt_u64("slots"), Some(4));
        assert_eq!(back.service("executor").unwrap().opt_bool("retain_workspace"), Some(true));
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = ContainerConfig::parse(
            "node_id = \"00000000-0000-0000-0000-000000000001\"\nlisten_endpoint = \"127.0.0.1:0\"\n",
        )
        .unwrap();
        assert_eq!(cfg.heartbeat_interval_ms, 1000);
        assert_eq!(cfg.dispatch_timeout_ms, 10_000);
        assert_eq!(cfg.security_provider, "anonymous");
        assert!(cfg.service_manifest.is_empty());
    }

    #[test]
    fn too_fast_heartbeat_is_invalid() {
        let cfg = ContainerConfig { heartbeat_interval_ms: 50, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn duplicate_detection() {
        let cfg = ContainerConfig::default().with_services(&["directory", "executor", "directory"]);
        assert_eq!(cfg.duplicate_service(), Some("directory"));
    }
}
