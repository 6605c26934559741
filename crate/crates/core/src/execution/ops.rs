use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use crate::ids::{AppId, JobId, NodeId};
use crate::storage::{ChannelRegistry, DataChannelSpec};

/// What an operation sees while it runs.
#[derive(Clone)]
pub struct OpContext {
    pub workspace: PathBuf,
    pub app_id: AppId,
    pub job_id: JobId,
    pub node_id: NodeId,
    pub channels: ChannelRegistry,
    /// Channels declared by the application.
    pub app_channels: Vec<DataChannelSpec>,
    cancel: Arc<AtomicBool>,
}

impl OpContext {
    pub fn new(workspace: PathBuf, channels: ChannelRegistry) -> Self {
        Self {
            workspace,
            app_id: AppId::nil(),
            job_id: JobId::nil(),
            node_id: NodeId::nil(),
            channels,
            app_channels: Vec::new(),
            cancel: Arc::new(AtomicBool::new(false)),
        }
    }

    pub fn with_cancel(mut self, cancel: Arc<AtomicBool>) -> Self {
        self.cancel = cancel;
        self
    }

    /// Long-running operations poll this and stop early.
    pub fn is_cancelled(&self) -> bool {
        self.cancel.load(Ordering::Relaxed)
    }
}

pub type OperationFn = Arc<dyn Fn(&OpContext, &[u8]) -> Result<Vec<u8>, String> + Send + Sync>;

/// Operations executors can run, by name. Fixed once the container starts.
#[derive(Clone, Default)]
pub struct OperationRegistry {
    ops: BTreeMap<String, OperationFn>,
}

impl std::fmt::Debug for OperationRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.ops.keys()).finish()
    }
}

impl OperationRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Task, thread and MapReduce operations.
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        crate::models::register_builtins(&mut r);
        r
    }

    pub fn register<F>(&mut self, name: &str, op: F)
    where
        F: Fn(&OpContext, &[u8]) -> Result<Vec<u8>, String> + Send + Sync + 'static,
    {
        self.ops.insert(name.to_string(), Arc::new(op));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.ops.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<OperationFn> {
        self.ops.get(name).cloned()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.ops.keys().map(String::as_str)
    }

    /// Run `name` in the calling thread.
    pub fn invoke(&self, name: &str, ctx: &OpContext, params: &[u8]) -> Result<Vec<u8>, String> {
        let op = self.ops.get(name).ok_or_else(|| format!("unknown operation {name}"))?;
        op(ctx, params)
    }
}
