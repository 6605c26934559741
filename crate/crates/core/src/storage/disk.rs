use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use uuid::Uuid;

use super::channel::{
    validate_name, ChannelClient, ChannelServer, DataChannelSpec, Direction, FileDescriptor,
    ServerOptions, StorageError,
};

/// SHA-256 of the empty input.
pub const EMPTY_SHA256: &str = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Files under one root directory. Writes land via a temporary file and an
/// atomic rename so readers never see partial content.
#[derive(Debug, Clone)]
pub struct DiskStore {
    root: PathBuf,
}

impl DiskStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StorageError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, name: &str) -> Result<PathBuf, StorageError> {
        Ok(self.root.join(validate_name(name)?))
    }

    pub fn write(&self, name: &str, content: &[u8]) -> Result<(), StorageError> {
        let path = self.path_of(name)?;
        let mut tmp = self.begin_write(name)?;
        tmp.1.write_all(content)?;
        self.commit_write(tmp, &path)
    }

    /// Open a hidden temporary file next to `name`'s final location.
    pub fn begin_write(&self, name: &str) -> Result<(PathBuf, fs::File), StorageError> {
        let path = self.path_of(name)?;
        let parent = path.parent().unwrap_or(&self.root);
        fs::create_dir_all(parent)?;
        let tmp = parent.join(format!(".tmp-{}", Uuid::new_v4()));
        let file = fs::File::create(&tmp)?;
        Ok((tmp, file))
    }

    pub fn commit_write(&self, (tmp, file): (PathBuf, fs::File), path: &Path) -> Result<(), StorageError> {
        file.sync_all()?;
        drop(file);
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(&self, name: &str) -> Result<Vec<u8>, StorageError> {
        match fs::read(self.path_of(name)?) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(StorageError::NotFound(name.to_string())),
            Err(e) => Err(e.into()),
        }
    }

    pub fn delete(&self, name: &str) -> Result<(), StorageError> {
        match fs::remove_file(self.path_of(name)?) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e.into()),
        }
    }

    /// Names beginning with `prefix`, sorted. Temporary files are skipped.
    pub fn list(&self, prefix: &str) -> Result<Vec<String>, StorageError> {
        if prefix.contains("..") || prefix.starts_with('/') {
            return Err(StorageError::InvalidName(prefix.to_string()));
        }
        let mut out = Vec::new();
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            let entries = match fs::read_dir(&dir) {
                Ok(e) => e,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
                Err(e) => return Err(e.into()),
            };
            for entry in entries {
                let entry = entry?;
                let path = entry.path();
                if entry.file_type()?.is_dir() {
                    stack.push(path);
                    continue;
                }
                if entry.file_name().to_string_lossy().starts_with(".tmp-") {
                    continue;
                }
                let rel = path
                    .strip_prefix(&self.root)
                    .expect("walk stays under root")
                    .to_string_lossy()
                    .replace('\\', "/");
                if rel.starts_with(prefix) {
                    out.push(rel);
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

/// Reference channel that reads and writes a directory directly.
pub(crate) struct LocalClient {
    spec: DataChannelSpec,
    store: DiskStore,
}

impl LocalClient {
    pub fn new(spec: DataChannelSpec) -> Result<Self, StorageError> {
        let store = DiskStore::open(PathBuf::from("/").join(&spec.root))?;
        Ok(Self { spec, store })
    }
}

impl ChannelClient for LocalClient {
    fn spec(&self) -> &DataChannelSpec {
        &self.spec
    }

    fn put(&self, name: &str, content: &[u8]) -> Result<FileDescriptor, StorageError> {
        self.store.write(name, content)?;
        Ok(FileDescriptor {
            logical_name: name.to_string(),
            size_bytes: content.len() as u64,
            digest: sha256_hex(content),
            channel: self.spec.clone(),
            direction: Direction::Input,
        })
    }

    fn get(&self, name: &str) -> Result<Vec<u8>, StorageError> {
        self.store.read(name)
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>, StorageError> {
        self.store.list(prefix)
    }

    fn delete(&self, name: &str) -> Result<(), StorageError> {
        self.store.delete(name)
    }
}

pub(crate) struct LocalServer {
    store: DiskStore,
}

impl LocalServer {
    pub fn new(opts: &ServerOptions) -> Result<Self, StorageError> {
        Ok(Self { store: DiskStore::open(&opts.root_dir)? })
    }
}

impl ChannelServer for LocalServer {
    fn spec(&self) -> DataChannelSpec {
        let root = self.store.root().to_string_lossy();
        DataChannelSpec::new("local", "", "", root.trim_start_matches('/'))
    }

    fn store(&self) -> &DiskStore {
        &self.store
    }

    fn shutdown(&self) {}
}
