//! `aftp`: the built-in framed transfer channel.
//!
//! Frames are 4-byte big-endian length prefixed, as on the container wire.
//! A connection carries a sequence of requests, each opened by a JSON header
//! frame `{"verb":..,"name":..,"token":..,"size":..}`:
//!
//! ```text
//! PUT   C: header(size=N)   S: {"status":"ready"}
//!       C: data frames (≤ 64 KiB each, N bytes total), 32-byte SHA-256 trailer
//!       S: {"status":"ok","size":N,"digest":"<hex>"}
//! GET   C: header           S: {"status":"ok","size":N}, data frames, trailer
//! LIST  C: header(name=prefix)  S: {"status":"ok","names":[..]}
//! DEL   C: header           S: {"status":"ok"}
//! ```
//!
//! Failures answer with `{"status":"error","code":"NotFound"|"AuthFailed"|
//! "DigestMismatch"|"InvalidName"|"Io","message":..}`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::channel::{
    ChannelClient, ChannelServer, DataChannelSpec, Direction, FileDescriptor, ServerOptions,
    StorageError, UnreachableCause,
};
use super::disk::DiskStore;
use crate::wire::{read_frame_sync, write_frame_sync, FrameError};

/// Largest data frame.
pub const AFTP_CHUNK: usize = 64 * 1024;
/// Trailer frame length (raw SHA-256).
pub const DIGEST_LEN: usize = 32;
const MAX_HEADER: usize = 64 * 1024;
const MAX_STATUS: usize = 16 * 1024 * 1024;
const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const IO_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RequestHeader {
    verb: String,
    name: String,
    #[serde(default)]
    token: String,
    #[serde(default)]
    size: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
struct Status {
    status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    size: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    names: Option<Vec<String>>,
}

impl Status {
    fn ok() -> Self {
        Self { status: "ok".into(), ..Default::default() }
    }

    fn error(err: &StorageError) -> Self {
        let (code, message) = match err {
            StorageError::AuthFailed => ("AuthFailed", String::new()),
            StorageError::NotFound(n) => ("NotFound", n.clone()),
            StorageError::DigestMismatch(n) => ("DigestMismatch", n.clone()),
            StorageError::InvalidName(n) => ("InvalidName", n.clone()),
            other => ("Io", other.to_string()),
        };
        Self { status: "error".into(), code: Some(code.into()), message: Some(message), ..Default::default() }
    }

    fn into_result(self) -> Result<Self, StorageError> {
        if self.status != "error" {
            return Ok(self);
        }
        let message = self.message.unwrap_or_default();
        Err(match self.code.as_deref() {
            Some("AuthFailed") => StorageError::AuthFailed,
            Some("NotFound") => StorageError::NotFound(message),
            Some("DigestMismatch") => StorageError::DigestMismatch(message),
            Some("InvalidName") => StorageError::InvalidName(message),
            _ => StorageError::Io(message),
        })
    }
}

fn frame_err(e: FrameError) -> StorageError {
    match e {
        FrameError::Io(io) => StorageError::Io(io.to_string()),
        other => StorageError::Protocol(other.to_string()),
    }
}

fn send_json<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<(), StorageError> {
    write_frame_sync(w, &serde_json::to_vec(value).expect("serializable")).map_err(frame_err)?;
    w.flush()?;
    Ok(())
}

fn recv_json<R: Read, T: for<'de> Deserialize<'de>>(r: &mut R, max: usize) -> Result<T, StorageError> {
    let frame = read_frame_sync(r, max).map_err(frame_err)?;
    serde_json::from_slice(&frame).map_err(|e| StorageError::Protocol(e.to_string()))
}

/// Stream `reader` as data frames followed by the digest trailer.
fn send_content<W: Write, R: Read>(w: &mut W, mut reader: R, size: u64) -> Result<[u8; DIGEST_LEN], StorageError> {
    let mut hasher = Sha256::new();
    let mut remaining = size;
    let mut buf = vec![0u8; AFTP_CHUNK];
    while remaining > 0 {
        let want = remaining.min(AFTP_CHUNK as u64) as usize;
        reader.read_exact(&mut buf[..want])?;
        hasher.update(&buf[..want]);
        write_frame_sync(w, &buf[..want]).map_err(frame_err)?;
        remaining -= want as u64;
    }
    let digest: [u8; DIGEST_LEN] = hasher.finalize().into();
    write_frame_sync(w, &digest).map_err(frame_err)?;
    w.flush()?;
    Ok(digest)
}

/// Receive `size` bytes of data frames plus the trailer into `sink`.
/// Returns the computed digest and whether it matched the trailer.
fn recv_content<R: Read, W: Write>(r: &mut R, sink: &mut W, size: u64) -> Result<([u8; DIGEST_LEN], bool), StorageError> {
    let mut hasher = Sha256::new();
    let mut received = 0u64;
    while received < size {
        let frame = read_frame_sync(r, AFTP_CHUNK).map_err(frame_err)?;
        if frame.is_empty() || received + frame.len() as u64 > size {
            return Err(StorageError::Protocol("data frames overrun declared size".into()));
        }
        hasher.update(&frame);
        sink.write_all(&frame)?;
        received += frame.len() as u64;
    }
    let trailer = read_frame_sync(r, DIGEST_LEN).map_err(frame_err)?;
    if trailer.len() != DIGEST_LEN {
        return Err(StorageError::Protocol("bad trailer length".into()));
    }
    let digest: [u8; DIGEST_LEN] = hasher.finalize().into();
    Ok((digest, digest[..] == trailer[..]))
}

/// Client half of the `aftp` channel. One connection per operation.
#[derive(Debug, Clone)]
pub struct AftpClient {
    spec: DataChannelSpec,
}

impl AftpClient {
    pub fn new(spec: DataChannelSpec) -> Self {
        Self { spec }
    }

    fn connect(&self) -> Result<TcpStream, StorageError> {
        let unreachable = |e: String| StorageError::ChannelUnreachable(UnreachableCause::Io(e));
        let addr = self
            .spec
            .endpoint
            .to_socket_addrs()
            .map_err(|e| unreachable(e.to_string()))?
            .next()
            .ok_or_else(|| unreachable(format!("{} did not resolve", self.spec.endpoint)))?;
        let stream = TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT).map_err(|e| unreachable(e.to_string()))?;
        stream.set_read_timeout(Some(IO_TIMEOUT))?;
        stream.set_write_timeout(Some(IO_TIMEOUT))?;
        stream.set_nodelay(true)?;
        Ok(stream)
    }

    fn header(&self, verb: &str, name: String, size: u64) -> RequestHeader {
        RequestHeader { verb: verb.into(), name, token: self.spec.credentials.clone(), size }
    }

    fn root_prefix(&self) -> String {
        if self.spec.root.is_empty() { String::new() } else { format!("{}/", self.spec.root) }
    }
}

impl ChannelClient for AftpClient {
    fn spec(&self) -> &DataChannelSpec {
        &self.spec
    }

    fn put(&self, name: &str, content: &[u8]) -> Result<FileDescriptor, StorageError> {
        let remote = self.spec.remote_name(name)?;
        let stream = self.connect()?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut writer = BufWriter::new(stream);
        send_json(&mut writer, &self.header("PUT", remote, content.len() as u64))?;
        recv_json::<_, Status>(&mut reader, MAX_STATUS)?.into_result()?;
        let digest = send_content(&mut writer, content, content.len() as u64)?;
        let status = recv_json::<_, Status>(&mut reader, MAX_STATUS)?.into_result()?;
        let digest = hex::encode(digest);
        if status.digest.as_deref() != Some(digest.as_str()) {
            return Err(StorageError::DigestMismatch(name.to_string()));
        }
        Ok(FileDescriptor {
            logical_name: name.to_string(),
            size_bytes: content.len() as u64,
            digest,
            channel: self.spec.clone(),
            direction: Direction::Input,
        })
    }

    fn get(&self, name: &str) -> Result<Vec<u8>, StorageError> {
        let remote = self.spec.remote_name(name)?;
        let stream = self.connect()?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut writer = BufWriter::new(stream);
        send_json(&mut writer, &self.header("GET", remote, 0))?;
        let status = recv_json::<_, Status>(&mut reader, MAX_STATUS)?
            .into_result()
            .map_err(|e| match e {
                StorageError::NotFound(_) => StorageError::NotFound(name.to_string()),
                other => other,
            })?;
        let size = status.size.ok_or_else(|| StorageError::Protocol("GET reply without size".into()))?;
        let mut content = Vec::with_capacity(size.min(64 << 20) as usize);
        let (_, matched) = recv_content(&mut reader, &mut content, size)?;
        if !matched {
            return Err(StorageError::DigestMismatch(name.to_string()));
        }
        Ok(content)
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>, StorageError> {
        let root = self.root_prefix();
        let stream = self.connect()?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut writer = BufWriter::new(stream);
        send_json(&mut writer, &self.header("LIST", format!("{root}{prefix}"), 0))?;
        let status = recv_json::<_, Status>(&mut reader, MAX_STATUS)?.into_result()?;
        Ok(status
            .names
            .unwrap_or_default()
            .into_iter()
            .filter_map(|n| n.strip_prefix(&root).map(str::to_string))
            .collect())
    }

    fn delete(&self, name: &str) -> Result<(), StorageError> {
        let remote = self.spec.remote_name(name)?;
        let stream = self.connect()?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut writer = BufWriter::new(stream);
        send_json(&mut writer, &self.header("DEL", remote, 0))?;
        recv_json::<_, Status>(&mut reader, MAX_STATUS)?.into_result()?;
        Ok(())
    }
}

/// Server half of the `aftp` channel: a thread per connection over a
/// [`DiskStore`].
pub struct AftpServer {
    endpoint: String,
    token: String,
    store: DiskStore,
    catalogue: Arc<Mutex<BTreeMap<String, FileDescriptor>>>,
    stopping: Arc<AtomicBool>,
}

struct ServerShared {
    store: DiskStore,
    token: String,
    spec: DataChannelSpec,
    catalogue: Arc<Mutex<BTreeMap<String, FileDescriptor>>>,
}

impl AftpServer {
    pub fn start(opts: &ServerOptions) -> Result<Self, StorageError> {
        let store = DiskStore::open(&opts.root_dir)?;
        let listen = if opts.listen.is_empty() { "127.0.0.1:0" } else { opts.listen.as_str() };
        let listener = TcpListener::bind(listen)
            .map_err(|e| StorageError::ChannelUnreachable(UnreachableCause::Io(format!("bind {listen}: {e}"))))?;
        let endpoint = listener.local_addr()?.to_string();
        let stopping = Arc::new(AtomicBool::new(false));
        let catalogue = Arc::new(Mutex::new(BTreeMap::new()));
        let shared = Arc::new(ServerShared {
            store: store.clone(),
            token: opts.token.clone(),
            spec: DataChannelSpec::new("aftp", &endpoint, "", ""),
            catalogue: catalogue.clone(),
        });
        let stop = stopping.clone();
        thread::Builder::new()
            .name(format!("aftp-{endpoint}"))
            .spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(conn) = conn else { continue };
                    let shared = shared.clone();
                    thread::spawn(move || {
                        if let Err(e) = serve_connection(&shared, conn) {
                            tracing::debug!(error = %e, "aftp connection ended");
                        }
                    });
                }
            })?;
        Ok(Self { endpoint, token: opts.token.clone(), store, catalogue, stopping })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl ChannelServer for AftpServer {
    fn spec(&self) -> DataChannelSpec {
        DataChannelSpec::new("aftp", &self.endpoint, &self.token, "")
    }

    fn store(&self) -> &DiskStore {
        &self.store
    }

    fn catalogue(&self) -> Vec<FileDescriptor> {
        self.catalogue.lock().expect("catalogue poisoned").values().cloned().collect()
    }

    fn shutdown(&self) {
        if !self.stopping.swap(true, Ordering::SeqCst) {
            // wake the accept loop
            let _ = TcpStream::connect(&self.endpoint);
        }
    }
}

impl Drop for AftpServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(shared: &ServerShared, stream: TcpStream) -> Result<(), StorageError> {
    stream.set_read_timeout(Some(IO_TIMEOUT))?;
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream.try_clone()?);
    loop {
        let header: RequestHeader = match read_frame_sync(&mut reader, MAX_HEADER) {
            Ok(frame) => serde_json::from_slice(&frame).map_err(|e| StorageError::Protocol(e.to_string()))?,
            Err(FrameError::Closed) => return Ok(()),
            Err(e) => return Err(frame_err(e)),
        };
        if !shared.token.is_empty() && header.token != shared.token {
            send_json(&mut writer, &Status::error(&StorageError::AuthFailed))?;
            let _ = stream.shutdown(Shutdown::Both);
            return Ok(());
        }
        let outcome = match header.verb.as_str() {
            "PUT" => handle_put(shared, &header, &mut reader, &mut writer),
            "GET" => handle_get(shared, &header, &mut writer),
            "LIST" => shared
                .store
                .list(&header.name)
                .and_then(|names| send_json(&mut writer, &Status { names: Some(names), ..Status::ok() })),
            "DEL" => shared.store.delete(&header.name).and_then(|_| {
                shared.catalogue.lock().expect("catalogue poisoned").remove(&header.name);
                send_json(&mut writer, &Status::ok())
            }),
            other => Err(StorageError::Protocol(format!("unknown verb {other}"))),
        };
        if let Err(e) = outcome {
            // content may be half-transferred; report and drop the connection
            let _ = send_json(&mut writer, &Status::error(&e));
            let _ = stream.shutdown(Shutdown::Both);
            return Err(e);
        }
    }
}

fn handle_put<R: Read, W: Write>(
    shared: &ServerShared,
    header: &RequestHeader,
    reader: &mut R,
    writer: &mut W,
) -> Result<(), StorageError> {
    let path = shared.store.path_of(&header.name)?;
    send_json(writer, &Status { status: "ready".into(), ..Default::default() })?;
    let (tmp_path, file) = shared.store.begin_write(&header.name)?;
    let mut sink = BufWriter::new(file);
    let received = recv_content(reader, &mut sink, header.size);
    let file = sink.into_inner().map_err(|e| StorageError::Io(e.to_string()))?;
    let (digest, matched) = match received {
        Ok(r) => r,
        Err(e) => {
            let _ = std::fs::remove_file(&tmp_path);
            return Err(e);
        }
    };
    if !matched {
        let _ = std::fs::remove_file(&tmp_path);
        return Err(StorageError::DigestMismatch(header.name.clone()));
    }
    shared.store.commit_write((tmp_path, file), &path)?;
    let digest = hex::encode(digest);
    shared.catalogue.lock().expect("catalogue poisoned").insert(
        header.name.clone(),
        FileDescriptor {
            logical_name: header.name.clone(),
            size_bytes: header.size,
            digest: digest.clone(),
            channel: shared.spec.clone(),
            direction: Direction::Input,
        },
    );
    send_json(writer, &Status { size: Some(header.size), digest: Some(digest), ..Status::ok() })
}

fn handle_get<W: Write>(shared: &ServerShared, header: &RequestHeader, writer: &mut W) -> Result<(), StorageError> {
    let path = shared.store.path_of(&header.name)?;
    let file = match File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(StorageError::NotFound(header.name.clone()))
        }
        Err(e) => return Err(e.into()),
    };
    let size = file.metadata()?.len();
    send_json(writer, &Status { size: Some(size), ..Status::ok() })?;
    send_content(writer, BufReader::new(file), size)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::{ChannelRegistry, EMPTY_SHA256};

    fn server(token: &str) -> (tempfile::TempDir, AftpServer) {
        let dir = tempfile::tempdir().unwrap();
        let srv = AftpServer::start(&ServerOptions {
            listen: "127.0.0.1:0".into(),
            root_dir: dir.path().into(),
            token: token.into(),
        })
        .unwrap();
        (dir, srv)
    }

    #[test]
    fn put_get_list_delete() {
        let (_dir, srv) = server("");
        let client = AftpClient::new(srv.spec().child("apps/1"));
        let fd = client.put("in/a.txt", b"hello").unwrap();
        assert_eq!(fd.digest, super::super::sha256_hex(b"hello"));
        assert_eq!(client.get("in/a.txt").unwrap(), b"hello");
        client.put("in/b.txt", &vec![7u8; AFTP_CHUNK * 2 + 3]).unwrap();
        assert_eq!(client.list("in/").unwrap(), vec!["in/a.txt", "in/b.txt"]);
        client.delete("in/a.txt").unwrap();
        client.delete("in/a.txt").unwrap();
        assert_eq!(client.get("in/a.txt"), Err(StorageError::NotFound("in/a.txt".into())));
        assert_eq!(srv.catalogue().len(), 1);
    }

    #[test]
    fn empty_file() {
        let (_dir, srv) = server("");
        let client = AftpClient::new(srv.spec());
        let fd = client.put("empty", b"").unwrap();
        assert_eq!((fd.size_bytes, fd.digest.as_str()), (0, EMPTY_SHA256));
        assert!(client.get("empty").unwrap().is_empty());
    }

    #[test]
    fn bad_token_is_rejected() {
        let (_dir, srv) = server("secret");
        let mut spec = srv.spec();
        spec.credentials = "wrong".into();
        let client = AftpClient::new(spec);
        assert_eq!(client.put("x", b"1"), Err(StorageError::AuthFailed));
        assert_eq!(client.get("x"), Err(StorageError::AuthFailed));
        let good = AftpClient::new(srv.spec());
        assert!(good.put("x", b"1").is_ok());
    }

    #[test]
    fn unreachable_endpoint() {
        let reg = ChannelRegistry::with_builtins();
        let spec = DataChannelSpec::new("aftp", "127.0.0.1:1", "", "");
        let err = reg.client(&spec).unwrap().get("x").unwrap_err();
        assert!(matches!(err, StorageError::ChannelUnreachable(UnreachableCause::Io(_))));
    }

    #[test]
    fn corrupted_upload_is_not_stored() {
        let (_dir, srv) = server("");
        let stream = TcpStream::connect(srv.endpoint()).unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut writer = BufWriter::new(stream);
        let header = RequestHeader { verb: "PUT".into(), name: "bad".into(), token: String::new(), size: 3 };
        send_json(&mut writer, &header).unwrap();
        recv_json::<_, Status>(&mut reader, MAX_STATUS).unwrap();
        write_frame_sync(&mut writer, b"abc").unwrap();
        write_frame_sync(&mut writer, &[0u8; DIGEST_LEN]).unwrap();
        writer.flush().unwrap();
        let status: Status = recv_json(&mut reader, MAX_STATUS).unwrap();
        assert_eq!(status.into_result().unwrap_err(), StorageError::DigestMismatch("bad".into()));
        assert!(srv.store().list("").unwrap().is_empty());
    }
}
