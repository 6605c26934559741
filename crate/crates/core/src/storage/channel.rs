use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::aftp::{AftpClient, AftpServer};
use super::disk::{DiskStore, LocalClient, LocalServer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnreachableCause {
    UnknownScheme(String),
    Io(String),
}

impl fmt::Display for UnreachableCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnreachableCause::UnknownScheme(s) => write!(f, "unknown scheme {s:?}"),
            UnreachableCause::Io(e) => f.write_str(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum StorageError {
    #[error("channel unreachable: {0}")]
    ChannelUnreachable(UnreachableCause),
    #[error("authentication failed")]
    AuthFailed,
    #[error("not found: {0}")]
    NotFound(String),
    #[error("digest mismatch on {0}")]
    DigestMismatch(String),
    #[error("invalid name {0:?}")]
    InvalidName(String),
    #[error("scheme {0:?} already registered")]
    DuplicateScheme(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for StorageError {
    fn from(e: std::io::Error) -> Self {
        StorageError::Io(e.to_string())
    }
}

/// Where a file lives and how to reach it: `scheme://[token@]endpoint/root`.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct DataChannelSpec {
    pub scheme: String,
    pub endpoint: String,
    #[serde(default)]
    pub credentials: String,
    /// Path prefix without a leading slash. The `local` scheme reads it as an
    /// absolute directory.
    #[serde(default)]
    pub root: String,
}

impl fmt::Debug for DataChannelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DataChannelSpec({}://{}/{})", self.scheme, self.endpoint, self.root)
    }
}

impl fmt::Display for DataChannelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}://", self.scheme)?;
        if !self.credentials.is_empty() {
            write!(f, "{}@", self.credentials)?;
        }
        write!(f, "{}/{}", self.endpoint, self.root)
    }
}

impl FromStr for DataChannelSpec {
    type Err = StorageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (scheme, rest) = s
            .split_once("://")
            .ok_or_else(|| StorageError::InvalidName(s.to_string()))?;
        let (authority, root) = rest.split_once('/').unwrap_or((rest, ""));
        let (credentials, endpoint) = match authority.rsplit_once('@') {
            Some((c, e)) => (c.to_string(), e.to_string()),
            None => (String::new(), authority.to_string()),
        };
        let spec = DataChannelSpec {
            scheme: scheme.to_string(),
            endpoint,
            credentials,
            root: root.trim_end_matches('/').to_string(),
        };
        spec.check_root()?;
        Ok(spec)
    }
}

impl DataChannelSpec {
    pub fn new(scheme: &str, endpoint: &str, credentials: &str, root: &str) -> Self {
        Self {
            scheme: scheme.into(),
            endpoint: endpoint.into(),
            credentials: credentials.into(),
            root: root.trim_matches('/').into(),
        }
    }

    /// Same channel with `sub` appended to the root.
    pub fn child(&self, sub: &str) -> Self {
        let sub = sub.trim_matches('/');
        let root = match (self.root.is_empty(), sub.is_empty()) {
            (_, true) => self.root.clone(),
            (true, false) => sub.to_string(),
            (false, false) => format!("{}/{}", self.root, sub),
        };
        Self { root, ..self.clone() }
    }

    pub fn check_root(&self) -> Result<(), StorageError> {
        if self.root.is_empty() {
            return Ok(());
        }
        validate_name(&self.root).map(|_| ())
    }

    /// Full remote name of `name` under this channel's root.
    pub fn remote_name(&self, name: &str) -> Result<String, StorageError> {
        validate_name(name)?;
        Ok(if self.root.is_empty() { name.to_string() } else { format!("{}/{}", self.root, name) })
    }
}

/// Reject names that could escape a channel root.
pub fn validate_name(name: &str) -> Result<&str, StorageError> {
    let bad = name.is_empty()
        || name.starts_with('/')
        || name.contains('\\')
        || name.contains('\0')
        || name.split('/').any(|c| c.is_empty() || c == "." || c == "..");
    if bad {
        Err(StorageError::InvalidName(name.to_string()))
    } else {
        Ok(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Input,
    Output,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDescriptor {
    pub logical_name: String,
    pub size_bytes: u64,
    /// Lowercase SHA-256 hex; empty when not yet known.
    pub digest: String,
    pub channel: DataChannelSpec,
    pub direction: Direction,
}

impl FileDescriptor {
    pub fn input(logical_name: &str, channel: DataChannelSpec) -> Self {
        Self {
            logical_name: logical_name.to_string(),
            size_bytes: 0,
            digest: String::new(),
            channel,
            direction: Direction::Input,
        }
    }

    pub fn output(logical_name: &str, channel: DataChannelSpec) -> Self {
        Self { direction: Direction::Output, ..Self::input(logical_name, channel) }
    }
}

/// Client side of a data channel.
pub trait ChannelClient: Send + Sync {
    fn spec(&self) -> &DataChannelSpec;
    fn put(&self, name: &str, content: &[u8]) -> Result<FileDescriptor, StorageError>;
    fn get(&self, name: &str) -> Result<Vec<u8>, StorageError>;
    fn list(&self, prefix: &str) -> Result<Vec<String>, StorageError>;
    /// Idempotent.
    fn delete(&self, name: &str) -> Result<(), StorageError>;
}

#[derive(Debug, Clone, Default)]
pub struct ServerOptions {
    pub listen: String,
    pub root_dir: PathBuf,
    /// Empty disables the token check.
    pub token: String,
}

/// Server side of a data channel: owns the storage space.
pub trait ChannelServer: Send + Sync {
    /// Spec clients should use to reach this server (root empty).
    fn spec(&self) -> DataChannelSpec;
    fn store(&self) -> &DiskStore;
    /// Files written through this server since it started.
    fn catalogue(&self) -> Vec<FileDescriptor> {
        Vec::new()
    }
    fn shutdown(&self);
}

pub type ClientFactory =
    Arc<dyn Fn(&DataChannelSpec) -> Result<Arc<dyn ChannelClient>, StorageError> + Send + Sync>;
pub type ServerFactory =
    Arc<dyn Fn(&ServerOptions) -> Result<Arc<dyn ChannelServer>, StorageError> + Send + Sync>;

/// Scheme → (client, server) implementations.
#[derive(Clone, Default)]
pub struct ChannelRegistry {
    schemes: Arc<RwLock<HashMap<String, (ClientFactory, ServerFactory)>>>,
}

impl fmt::Debug for ChannelRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names: Vec<String> = self.schemes.read().unwrap().keys().cloned().collect();
        names.sort();
        f.debug_struct("ChannelRegistry").field("schemes", &names).finish()
    }
}

impl ChannelRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Registry with `aftp` and `local` registered.
    pub fn with_builtins() -> Self {
        let reg = Self::empty();
        reg.register_channel(
            "aftp",
            Arc::new(|spec: &DataChannelSpec| Ok(Arc::new(AftpClient::new(spec.clone())) as Arc<dyn ChannelClient>)),
            Arc::new(|opts: &ServerOptions| Ok(Arc::new(AftpServer::start(opts)?) as Arc<dyn ChannelServer>)),
        )
        .expect("fresh registry");
        reg.register_channel(
            "local",
            Arc::new(|spec: &DataChannelSpec| Ok(Arc::new(LocalClient::new(spec.clone())?) as Arc<dyn ChannelClient>)),
            Arc::new(|opts: &ServerOptions| Ok(Arc::new(LocalServer::new(opts)?) as Arc<dyn ChannelServer>)),
        )
        .expect("fresh registry");
        reg
    }

    pub fn register_channel(
        &self,
        scheme: &str,
        client: ClientFactory,
        server: ServerFactory,
    ) -> Result<(), StorageError> {
        let mut schemes = self.schemes.write().expect("registry poisoned");
        if schemes.contains_key(scheme) {
            return Err(StorageError::DuplicateScheme(scheme.to_string()));
        }
        schemes.insert(scheme.to_string(), (client, server));
        Ok(())
    }

    pub fn has_scheme(&self, scheme: &str) -> bool {
        self.schemes.read().expect("registry poisoned").contains_key(scheme)
    }

    pub fn client(&self, spec: &DataChannelSpec) -> Result<Arc<dyn ChannelClient>, StorageError> {
        spec.check_root()?;
        let factory = self
            .schemes
            .read()
            .expect("registry poisoned")
            .get(&spec.scheme)
            .map(|(c, _)| c.clone())
            .ok_or_else(|| StorageError::ChannelUnreachable(UnreachableCause::UnknownScheme(spec.scheme.clone())))?;
        factory(spec)
    }

    pub fn serve(&self, scheme: &str, options: &ServerOptions) -> Result<Arc<dyn ChannelServer>, StorageError> {
        let factory = self
            .schemes
            .read()
            .expect("registry poisoned")
            .get(scheme)
            .map(|(_, s)| s.clone())
            .ok_or_else(|| StorageError::ChannelUnreachable(UnreachableCause::UnknownScheme(scheme.to_string())))?;
        factory(options)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_uri_roundtrip() {
        let spec: DataChannelSpec = "aftp://tok@127.0.0.1:7001/jobs/in".parse().unwrap();
        assert_eq!(spec.scheme, "aftp");
        assert_eq!(spec.credentials, "tok");
        assert_eq!(spec.endpoint, "127.0.0.1:7001");
        assert_eq!(spec.root, "jobs/in");
        assert_eq!(spec.to_string(), "aftp://tok@127.0.0.1:7001/jobs/in");
        let local: DataChannelSpec = "local:///tmp/data".parse().unwrap();
        assert_eq!(local.endpoint, "");
        assert_eq!(local.root, "tmp/data");
    }

    #[test]
    fn traversal_names_are_rejected() {
        for bad in ["", "/etc/passwd", "../x", "a/../../b", "a//b", "./a", "a\\b", "a/."] {
            assert!(validate_name(bad).is_err(), "{bad:?} accepted");
        }
        for good in ["a", "mr/app/m0/1", "part-r-0", "dir/file.txt"] {
            assert!(validate_name(good).is_ok());
        }
        assert!("aftp://h:1/../up".parse::<DataChannelSpec>().is_err());
    }

    #[test]
    fn duplicate_scheme_is_refused() {
        let reg = ChannelRegistry::with_builtins();
        let dup = reg.register_channel(
            "local",
            Arc::new(|_: &DataChannelSpec| Err(StorageError::AuthFailed)),
            Arc::new(|_: &ServerOptions| Err(StorageError::AuthFailed)),
        );
        assert_eq!(dup, Err(StorageError::DuplicateScheme("local".into())));
    }

    #[test]
    fn unknown_scheme_is_unreachable_with_distinct_cause() {
        let reg = ChannelRegistry::with_builtins();
        let spec = DataChannelSpec::new("ftp", "host:21", "", "");
        let err = reg.client(&spec).err().unwrap();
        assert_eq!(err, StorageError::ChannelUnreachable(UnreachableCause::UnknownScheme("ftp".into())));
    }

    #[test]
    fn child_roots_compose() {
        let base = DataChannelSpec::new("aftp", "h:1", "", "");
        assert_eq!(base.child("sweep/3").root, "sweep/3");
        assert_eq!(base.child("sweep/3").child("x").root, "sweep/3/x");
        assert_eq!(base.remote_name("a").unwrap(), "a");
        assert_eq!(base.child("r").remote_name("a").unwrap(), "r/a");
    }
}
