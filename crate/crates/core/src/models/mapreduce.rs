//! MapReduce: map and reduce operations run by executors, and the
//! client-side coordinator that chains the two phases.

use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::kv::{decode_pairs, write_pair, KeyValuePair};
use super::partition::partition;
use crate::appmodel::{Application, ClientError, UnitStatus};
use crate::execution::{JobSpec, JobState, Model, OpContext, OperationRegistry, Payload};
use crate::ids::JobId;
use crate::storage::{sha256_hex, DataChannelSpec, FileDescriptor, StagingPlan, StorageError};

pub const OP_MAP: &str = "mr.map";
pub const OP_REDUCE: &str = "mr.reduce";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    /// Key is the line number, value is the line.
    #[default]
    Text,
    /// Binary key/value records.
    Kv,
}

/// Emits `(word, "1")` per whitespace-separated token, or the pair unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mapper {
    Wordcount,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reducer {
    /// Values are decimal integers; emits their sum.
    Sum,
    /// Emits every value.
    Identity,
}

impl Mapper {
    pub fn apply(self, pair: KeyValuePair, emit: &mut impl FnMut(&[u8], &[u8])) {
        match self {
            Mapper::Wordcount => {
                for word in pair.value.split(|b| b.is_ascii_whitespace()).filter(|w| !w.is_empty()) {
                    emit(word, b"1");
                }
            }
            Mapper::Identity => emit(&pair.key, &pair.value),
        }
    }
}

impl Reducer {
    pub fn apply(self, key: &[u8], values: &[Vec<u8>], emit: &mut impl FnMut(&[u8], &[u8])) -> Result<(), String> {
        match self {
            Reducer::Sum => {
                let mut total: u64 = 0;
                for v in values {
                    let n: u64 = std::str::from_utf8(v)
                        .ok()
                        .and_then(|s| s.trim().parse().ok())
                        .ok_or_else(|| format!("non-numeric value for key {}", String::from_utf8_lossy(key)))?;
                    total = total.checked_add(n).ok_or("sum overflow")?;
                }
                emit(key, total.to_string().as_bytes());
            }
            Reducer::Identity => {
                for v in values {
                    emit(key, v);
                }
            }
        }
        Ok(())
    }
}

pub fn read_input(bytes: &[u8], format: InputFormat) -> Result<Vec<KeyValuePair>, String> {
    match format {
        InputFormat::Text => {
            let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
            if body.is_empty() {
                return Ok(Vec::new());
            }
            Ok(body
                .split(|b| *b == b'\n')
                .enumerate()
                .map(|(i, line)| KeyValuePair::new(i.to_string(), line.strip_suffix(b"\r").unwrap_or(line)))
                .collect())
        }
        InputFormat::Kv => decode_pairs(bytes).map_err(|e| e.to_string()),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapParams {
    pub mapper: Mapper,
    #[serde(default)]
    pub input_format: InputFormat,
    /// Input file names in the workspace.
    pub inputs: Vec<String>,
    pub reducers: u32,
    /// Where buckets are written; `<prefix>/<bucket>` under it.
    pub intermediate: DataChannelSpec,
    pub prefix: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapResult {
    pub pairs_written: u64,
    /// One descriptor per bucket, index = bucket.
    pub buckets: Vec<FileDescriptor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReduceParams {
    pub reducer: Reducer,
    pub partition: u32,
    pub intermediates: Vec<FileDescriptor>,
    /// File written in the workspace, uploaded by stage-out.
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReduceResult {
    pub pairs_read: u64,
    pub pairs_written: u64,
}

/// Name of the reduce output for partition `i`.
pub fn output_name(i: u32) -> String {
    format!("part-r-{i}")
}

fn run_map(ctx: &OpContext, p: MapParams) -> Result<Vec<u8>, String> {
    if p.reducers == 0 {
        return Err("reducers must be at least 1".into());
    }
    let mut buckets = vec![Vec::new(); p.reducers as usize];
    let mut written = 0u64;
    for name in &p.inputs {
        if ctx.is_cancelled() {
            return Err("cancelled".into());
        }
        let path = ctx.workspace.join(crate::storage::validate_name(name).map_err(|e| e.to_string())?);
        let bytes = std::fs::read(&path).map_err(|e| format!("read {name}: {e}"))?;
        for pair in read_input(&bytes, p.input_format)? {
            p.mapper.apply(pair, &mut |k, v| {
                write_pair(&mut buckets[partition(k, p.reducers) as usize], k, v);
                written += 1;
            });
        }
    }
    let client = ctx.channels.client(&p.intermediate).map_err(|e| e.to_string())?;
    let mut fds = Vec::with_capacity(buckets.len());
    for (i, bucket) in buckets.iter().enumerate() {
        let name = format!("{}/{i}", p.prefix);
        fds.push(client.put(&name, bucket).map_err(|e| format!("write {name}: {e}"))?);
    }
    Ok(serde_json::to_vec(&MapResult { pairs_written: written, buckets: fds }).expect("serializes"))
}

fn run_reduce(ctx: &OpContext, p: ReduceParams) -> Result<Vec<u8>, String> {
    let mut groups: BTreeMap<Vec<u8>, Vec<Vec<u8>>> = BTreeMap::new();
    let mut read = 0u64;
    for fd in &p.intermediates {
        if ctx.is_cancelled() {
            return Err("cancelled".into());
        }
        let client = ctx.channels.client(&fd.channel).map_err(|e| e.to_string())?;
        let bytes = client.get(&fd.logical_name).map_err(|e| match e {
            StorageError::NotFound(n) => format!("MissingIntermediate: {n}"),
            other => other.to_string(),
        })?;
        if !fd.digest.is_empty() && sha256_hex(&bytes) != fd.digest {
            return Err(StorageError::DigestMismatch(fd.logical_name.clone()).to_string());
        }
        for pair in decode_pairs(&bytes).map_err(|e| e.to_string())? {
            read += 1;
            groups.entry(pair.key).or_default().push(pair.value);
        }
    }
    let mut out = Vec::new();
    let mut written = 0u64;
    for (key, values) in &groups {
        p.reducer.apply(key, values, &mut |k, v| {
            out.extend_from_slice(k);
            out.push(b'\t');
            out.extend_from_slice(v);
            out.push(b'\n');
            written += 1;
        })?;
    }
    let path = ctx.workspace.join(crate::storage::validate_name(&p.output).map_err(|e| e.to_string())?);
    std::fs::write(path, out).map_err(|e| e.to_string())?;
    Ok(serde_json::to_vec(&ReduceResult { pairs_read: read, pairs_written: written }).expect("serializes"))
}

pub(crate) fn register(r: &mut OperationRegistry) {
    r.register(OP_MAP, |ctx, p| run_map(ctx, serde_json::from_slice(p).map_err(|e| e.to_string())?));
    r.register(OP_REDUCE, |ctx, p| run_reduce(ctx, serde_json::from_slice(p).map_err(|e| e.to_string())?));
}

/// Parse a reduce output file back into `(key, value)` lines.
pub fn parse_output(bytes: &[u8]) -> Vec<(String, String)> {
    String::from_utf8_lossy(bytes)
        .lines()
        .filter_map(|l| l.split_once('\t'))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapReduceConfig {
    pub mapper: Mapper,
    pub reducer: Reducer,
    pub reducers: u32,
    #[serde(default)]
    pub input_format: InputFormat,
    /// Receives intermediate buckets and the `part-r-*` files.
    pub output: DataChannelSpec,
    /// Per-job attempt budget; `None` keeps the scheduler default.
    #[serde(default)]
    pub max_attempts: Option<u32>,
}

#[derive(Debug, Error)]
pub enum MapReduceError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("{phase} job {job} ended {state:?}: {cause}")]
    JobFailed { phase: &'static str, job: JobId, state: JobState, cause: String },
    #[error("bad job result: {0}")]
    BadResult(String),
    #[error("pair count mismatch: map wrote {written}, reduce read {read}")]
    PairCountMismatch { written: u64, read: u64 },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone)]
pub struct MapReduceOutcome {
    pub outputs: Vec<FileDescriptor>,
    pub map_jobs: Vec<JobId>,
    pub reduce_jobs: Vec<JobId>,
    pub pairs: u64,
}

fn completed<T: for<'de> Deserialize<'de>>(phase: &'static str, id: JobId, st: &UnitStatus) -> Result<T, MapReduceError> {
    if st.state != JobState::Completed {
        return Err(MapReduceError::JobFailed {
            phase,
            job: id,
            state: st.state,
            cause: st.failure_cause.clone().unwrap_or_default(),
        });
    }
    serde_json::from_slice(st.result.as_deref().unwrap_or_default()).map_err(|e| MapReduceError::BadResult(e.to_string()))
}

/// Run one map job per input, then one reduce job per partition.
pub async fn run_mapreduce(
    app: &mut Application,
    inputs: &[FileDescriptor],
    config: &MapReduceConfig,
    timeout: Duration,
) -> Result<MapReduceOutcome, MapReduceError> {
    if config.reducers == 0 {
        return Err(MapReduceError::Invalid("reducers must be at least 1".into()));
    }
    app.require_model(Model::Mapreduce)?;
    let app_id = app.id();
    let deadline = tokio::time::Instant::now() + timeout;

    let mut map_jobs = Vec::new();
    for input in inputs {
        let job_id = JobId::new();
        let params = MapParams {
            mapper: config.mapper,
            input_format: config.input_format,
            inputs: vec![input.logical_name.clone()],
            reducers: config.reducers,
            intermediate: intermediate_channel(&config.output),
            prefix: format!("mr/{app_id}/{job_id}"),
        };
        let spec = JobSpec {
            job_id: Some(job_id),
            payload: Payload::json(OP_MAP, &params),
            staging: StagingPlan { inputs: vec![input.clone()], outputs: vec![] },
            max_attempts: config.max_attempts,
        };
        map_jobs.push(app.add_unit(spec)?);
    }
    app.submit().await?;
    let states = app.wait_for(&map_jobs, deadline.saturating_duration_since(tokio::time::Instant::now())).await?;

    let mut written = 0u64;
    let mut per_bucket: Vec<Vec<FileDescriptor>> = vec![Vec::new(); config.reducers as usize];
    for id in &map_jobs {
        let r: MapResult = completed("map", *id, &states[id])?;
        if r.buckets.len() != config.reducers as usize {
            return Err(MapReduceError::BadResult(format!("map job {id} returned {} buckets", r.buckets.len())));
        }
        written += r.pairs_written;
        for (i, fd) in r.buckets.into_iter().enumerate() {
            per_bucket[i].push(fd);
        }
    }

    let mut reduce_jobs = Vec::new();
    for (i, intermediates) in per_bucket.into_iter().enumerate() {
        let output = output_name(i as u32);
        let params = ReduceParams { reducer: config.reducer, partition: i as u32, intermediates, output: output.clone() };
        let spec = JobSpec {
            job_id: None,
            payload: Payload::json(OP_REDUCE, &params),
            staging: StagingPlan { inputs: vec![], outputs: vec![FileDescriptor::output(&output, config.output.clone())] },
            max_attempts: config.max_attempts,
        };
        reduce_jobs.push(app.add_unit(spec)?);
    }
    app.submit().await?;
    let states = app.wait_for(&reduce_jobs, deadline.saturating_duration_since(tokio::time::Instant::now())).await?;

    let mut read = 0u64;
    let mut outputs = Vec::new();
    for id in &reduce_jobs {
        let r: ReduceResult = completed("reduce", *id, &states[id])?;
        read += r.pairs_read;
        outputs.extend(states[id].outputs.iter().cloned());
    }
    if read != written {
        return Err(MapReduceError::PairCountMismatch { written, read });
    }
    Ok(MapReduceOutcome { outputs, map_jobs, reduce_jobs, pairs: written })
}

/// Buckets live beside the outputs. A remote root is dropped so bucket
/// names stay short; a local root is the directory itself and is kept.
fn intermediate_channel(output: &DataChannelSpec) -> DataChannelSpec {
    if output.scheme == "local" {
        output.clone()
    } else {
        DataChannelSpec { root: String::new(), ..output.clone() }
    }
}

/// Sequential reference: what a run over `inputs` must produce.
pub fn run_sequential(inputs: &[Vec<u8>], config: &MapReduceConfig) -> Result<Vec<(String, String)>, String> {
    let mut groups: BTreeMap<Vec<u8>, Vec<Vec<u8>>> = BTreeMap::new();
    for bytes in inputs {
        for pair in read_input(bytes, config.input_format)? {
            config.mapper.apply(pair, &mut |k, v| groups.entry(k.to_vec()).or_default().push(v.to_vec()));
        }
    }
    let mut out = Vec::new();
    for (k, vs) in &groups {
        config.reducer.apply(k, vs, &mut |k, v| {
            out.push((String::from_utf8_lossy(k).into_owned(), String::from_utf8_lossy(v).into_owned()))
        })?;
    }
    Ok(out)
}

/// Count of each `(key, value)` line, for comparing outputs as multisets.
pub fn multiset(lines: impl IntoIterator<Item = (String, String)>) -> HashMap<(String, String), usize> {
    let mut m = HashMap::new();
    for l in lines {
        *m.entry(l).or_insert(0) += 1;
    }
    m
}
