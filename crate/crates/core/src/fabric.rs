//! Fabric services: host profiling and on-demand node provisioning.
//!
//! Profiling never fails. Values the host does not expose are reported with
//! the sentinel `0` (and logged once), so schedulers can always consume a
//! complete [`StaticProfile`] / [`DynamicStats`] pair.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::ContainerConfig;
use crate::ids::{now_ms, NodeId, TimestampMs};

/// Width of the window `cpu_usage_percent` is averaged over.
pub const CPU_SAMPLE_WINDOW: Duration = Duration::from_millis(500);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticProfile {
    pub cpu_count: u32,
    /// `0` when the frequency cannot be read.
    pub cpu_frequency_mhz: u32,
    pub total_memory_mb: u64,
    /// `0` when the filesystem cannot be queried.
    pub total_storage_mb: u64,
    pub os_name: String,
}

impl Default for StaticProfile {
    fn default() -> Self {
        Self {
            cpu_count: 1,
            cpu_frequency_mhz: 0,
            total_memory_mb: 1,
            total_storage_mb: 0,
            os_name: std::env::consts::OS.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DynamicStats {
    pub cpu_usage_percent: f64,
    pub available_memory_mb: u64,
    pub available_storage_mb: u64,
    pub sampled_at: TimestampMs,
}

/// Static profile of the host, probed once per process.
pub fn probe_static() -> StaticProfile {
    static PROFILE: OnceLock<StaticProfile> = OnceLock::new();
    PROFILE.get_or_init(read_static_profile).clone()
}

fn read_static_profile() -> StaticProfile {
    let meminfo = fs::read_to_string("/proc/meminfo").unwrap_or_default();
    let total_memory_mb = meminfo_field_mb(&meminfo, "MemTotal").unwrap_or_else(|| {
        tracing::warn!("total memory unreadable, reporting 1 MB");
        1
    });
    let (total_storage_mb, _) = storage_mb(Path::new("/")).unwrap_or((0, 0));
    StaticProfile {
        cpu_count: logical_cpus(),
        cpu_frequency_mhz: cpu_frequency_mhz().unwrap_or_else(|| {
            tracing::warn!("cpu frequency unreadable, reporting 0");
            0
        }),
        total_memory_mb: total_memory_mb.max(1),
        total_storage_mb,
        os_name: os_name(),
    }
}

fn logical_cpus() -> u32 {
    #[cfg(target_os = "linux")]
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        if libc::sched_getaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &mut set) == 0 {
            let n = libc::CPU_COUNT(&set);
            if n > 0 {
                return n as u32;
            }
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get() as u32)
        .unwrap_or(1)
}

fn cpu_frequency_mhz() -> Option<u32> {
    if let Ok(khz) = fs::read_to_string("/sys/devices/system/cpu/cpu0/cpufreq/cpuinfo_max_freq") {
        if let Ok(khz) = khz.trim().parse::<u64>() {
            return Some((khz / 1000) as u32);
        }
    }
    let cpuinfo = fs::read_to_string("/proc/cpuinfo").ok()?;
    cpuinfo
        .lines()
        .find(|l| l.starts_with("cpu MHz"))
        .and_then(|l| l.split(':').nth(1))
        .and_then(|v| v.trim().parse::<f64>().ok())
        .map(|mhz| mhz.round() as u32)
}

fn os_name() -> String {
    fs::read_to_string("/etc/os-release")
        .ok()
        .and_then(|s| {
            s.lines()
                .find_map(|l| l.strip_prefix("PRETTY_NAME="))
                .map(|v| v.trim_matches('"').to_string())
        })
        .unwrap_or_else(|| std::env::consts::OS.to_string())
}

fn meminfo_field_mb(meminfo: &str, field: &str) -> Option<u64> {
    meminfo
        .lines()
        .find(|l| l.split(':').next() == Some(field))
        .and_then(|l| l.split_whitespace().nth(1))
        .and_then(|kb| kb.parse::<u64>().ok())
        .map(|kb| kb / 1024)
}

/// `(total, available)` megabytes of the filesystem holding `path`.
fn storage_mb(path: &Path) -> Option<(u64, u64)> {
    use std::ffi::CString;
    use std::os::unix::ffi::OsStrExt;

    let c_path = CString::new(path.as_os_str().as_bytes()).ok()?;
    let mut stat: libc::statvfs = unsafe { std::mem::zeroed() };
    if unsafe { libc::statvfs(c_path.as_ptr(), &mut stat) } != 0 {
        return None;
    }
    let frsize = stat.f_frsize as u64;
    let total = stat.f_blocks as u64 * frsize / (1024 * 1024);
    let avail = stat.f_bavail as u64 * frsize / (1024 * 1024);
    Some((total, avail))
}

#[derive(Debug, Clone, Copy)]
struct CpuTimes {
    idle: u64,
    total: u64,
}

fn read_cpu_times() -> Option<CpuTimes> {
    let stat = fs::read_to_string("/proc/stat").ok()?;
    let line = stat.lines().next()?;
    let mut fields = line.split_whitespace();
    if fields.next()? != "cpu" {
        return None;
    }
    let values: Vec<u64> = fields.filter_map(|v| v.parse().ok()).collect();
    if values.len() < 4 {
        return None;
    }
    // idle + iowait
    let idle = values[3] + values.get(4).copied().unwrap_or(0);
    // guest time is already folded into user/nice
    let total = values.iter().take(8).sum();
    Some(CpuTimes { idle, total })
}

fn usage_between(a: CpuTimes, b: CpuTimes) -> f64 {
    let total = b.total.saturating_sub(a.total);
    if total == 0 {
        return 0.0;
    }
    let idle = b.idle.saturating_sub(a.idle).min(total);
    (100.0 * (total - idle) as f64 / total as f64).clamp(0.0, 100.0)
}

/// Take one dynamic sample, blocking for one full [`CPU_SAMPLE_WINDOW`].
pub fn sample_dynamic() -> DynamicStats {
    let sampler = DynamicSampler::new(probe_static());
    std::thread::sleep(CPU_SAMPLE_WINDOW);
    sampler.sample()
}

/// Non-blocking dynamic sampler.
///
/// CPU usage is the average over the most recent completed window of at
/// least [`CPU_SAMPLE_WINDOW`]; calls made before a window completes reuse the
/// previous figure. `sampled_at` never decreases.
#[derive(Debug)]
pub struct DynamicSampler {
    profile: StaticProfile,
    state: Mutex<SamplerState>,
}

#[derive(Debug)]
struct SamplerState {
    window_start: Option<(Instant, CpuTimes)>,
    last_usage: f64,
    last_sampled_at: TimestampMs,
}

impl DynamicSampler {
    pub fn new(profile: StaticProfile) -> Self {
        Self {
            profile,
            state: Mutex::new(SamplerState {
                window_start: read_cpu_times().map(|t| (Instant::now(), t)),
                last_usage: 0.0,
                last_sampled_at: 0,
            }),
        }
    }

    pub fn profile(&self) -> &StaticProfile {
        &self.profile
    }

    pub fn sample(&self) -> DynamicStats {
        let mut state = self.state.lock().expect("sampler lock poisoned");
        match (state.window_start, read_cpu_times()) {
            (Some((started, times)), Some(now_times)) => {
                if started.elapsed() >= CPU_SAMPLE_WINDOW {
                    state.last_usage = usage_between(times, now_times);
                    state.window_start = Some((Instant::now(), now_times));
                }
            }
            (None, Some(now_times)) => state.window_start = Some((Instant::now(), now_times)),
            _ => tracing::debug!("cpu counters unreadable, reporting 0"),
        }

        let meminfo = fs::read_to_string("/proc/meminfo").unwrap_or_default();
        let available_memory_mb = meminfo_field_mb(&meminfo, "MemAvailable")
            .unwrap_or(0)
            .min(self.profile.total_memory_mb);
        let available_storage_mb = storage_mb(Path::new("/")).map(|(_, a)| a).unwrap_or(0);

        let sampled_at = now_ms().max(state.last_sampled_at);
        state.last_sampled_at = sampled_at;
        DynamicStats {
            cpu_usage_percent: state.last_usage,
            available_memory_mb,
            available_storage_mb,
            sampled_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvisionRequest {
    pub count: u32,
    pub required_services: Vec<String>,
    /// `0` means the node lives until stopped.
    #[serde(default)]
    pub ttl_seconds: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProvisionError {
    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("capacity exceeded: provider allows {max} nodes, {in_use} in use, {requested} requested")]
    CapacityExceeded { max: u32, in_use: u32, requested: u32 },
    #[error("invalid provision request: {0}")]
    InvalidRequest(String),
}

/// Acquires new nodes on demand. Exactly one provider is active per container.
#[async_trait]
pub trait Provider: Send + Sync {
    fn name(&self) -> &str;

    /// Start `request.count` containers and return their listen endpoints.
    async fn provision(&self, request: &ProvisionRequest) -> Result<Vec<String>, ProvisionError>;
}

pub(crate) fn validate_request(request: &ProvisionRequest) -> Result<(), ProvisionError> {
    if request.count == 0 {
        return Err(ProvisionError::InvalidRequest("count must be at least 1".into()));
    }
    Ok(())
}

/// Bind an ephemeral loopback port and release it, returning `127.0.0.1:<port>`.
pub fn free_local_endpoint() -> std::io::Result<String> {
    let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
    Ok(listener.local_addr()?.to_string())
}

/// Launches container processes on this machine from a generated config file.
pub struct LocalSpawnProvider {
    binary: PathBuf,
    work_dir: PathBuf,
    template: ContainerConfig,
    max_nodes: u32,
    children: tokio::sync::Mutex<Vec<Child>>,
}

impl LocalSpawnProvider {
    /// `template` supplies seeds, providers and timing; node id, listen
    /// endpoint, manifest and ttl are generated per node.
    pub fn new(
        binary: impl Into<PathBuf>,
        work_dir: impl Into<PathBuf>,
        template: ContainerConfig,
        max_nodes: u32,
    ) -> Self {
        Self {
            binary: binary.into(),
            work_dir: work_dir.into(),
            template,
            max_nodes,
            children: tokio::sync::Mutex::new(Vec::new()),
        }
    }

    /// Config file that would be used for one new node.
    pub fn node_config(&self, request: &ProvisionRequest) -> std::io::Result<ContainerConfig> {
        let mut config = self.template.clone();
        config.node_id = NodeId::new();
        config.listen_endpoint = free_local_endpoint()?;
        config.service_manifest = request
            .required_services
            .iter()
            .map(|name| crate::container::ServiceEntry::new(name))
            .collect();
        config.ttl_seconds = request.ttl_seconds;
        Ok(config)
    }

    /// Kill every process this provider spawned.
    pub async fn shutdown(&self) {
        let mut children = self.children.lock().await;
        for child in children.iter_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
        children.clear();
    }
}

#[async_trait]
impl Provider for LocalSpawnProvider {
    fn name(&self) -> &str {
        "local-spawn"
    }

    async fn provision(&self, request: &ProvisionRequest) -> Result<Vec<String>, ProvisionError> {
        validate_request(request)?;
        // one in-flight request at a time
        let mut children = self.children.lock().await;
        children.retain_mut(|c| matches!(c.try_wait(), Ok(None)));
        let in_use = children.len() as u32;
        if self.max_nodes == 0 || in_use + request.count > self.max_nodes {
            return Err(ProvisionError::CapacityExceeded {
                max: self.max_nodes,
                in_use,
                requested: request.count,
            });
        }
        if !self.binary.exists() {
            return Err(ProvisionError::ProviderUnavailable(format!(
                "container binary {} not found",
                self.binary.display()
            )));
        }
        fs::create_dir_all(&self.work_dir)
            .map_err(|e| ProvisionError::ProviderUnavailable(e.to_string()))?;

        let mut endpoints = Vec::with_capacity(request.count as usize);
        for _ in 0..request.count {
            let config = self
                .node_config(request)
                .map_err(|e| ProvisionError::ProviderUnavailable(e.to_string()))?;
            let path = self.work_dir.join(format!("node-{}.toml", config.node_id));
            config
                .save(&path)
                .map_err(|e| ProvisionError::ProviderUnavailable(e.to_string()))?;
            let child = Command::new(&self.binary)
                .arg("--config")
                .arg(&path)
                .stdin(Stdio::null())
                .spawn()
                .map_err(|e| ProvisionError::ProviderUnavailable(e.to_string()))?;
            children.push(child);
            endpoints.push(config.listen_endpoint.clone());
        }
        Ok(endpoints)
    }
}
