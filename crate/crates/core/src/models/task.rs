//! Bag-of-tasks model and the predefined task operations.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::appmodel::{Application, ClientError, UnitStatus};
use crate::execution::{JobSpec, Model, OpContext, OperationRegistry, Payload};
use crate::storage::{validate_name, StagingPlan};

pub const OP_RUN_PROCESS: &str = "run_process";
pub const OP_COPY_FILE: &str = "copy_file";
pub const OP_RENAME_FILE: &str = "rename_file";
pub const OP_DELETE_FILE: &str = "delete_file";
pub const OP_SLEEP: &str = "sleep";
pub const OP_FIB: &str = "fib";
pub const OP_FAIL: &str = "fail";
pub const OP_SEQUENCE: &str = "task.sequence";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunProcess {
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwoPaths {
    pub from: String,
    pub to: String,
}

/// One task: an operation name plus parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskUnit {
    pub payload: Payload,
    #[serde(default)]
    pub staging: StagingPlan,
}

impl TaskUnit {
    pub fn new(payload: Payload) -> Self {
        Self { payload, staging: StagingPlan::default() }
    }

    pub fn run_process(command: &str, args: &[&str]) -> Self {
        Self::new(Payload::json(
            OP_RUN_PROCESS,
            &RunProcess { command: command.into(), args: args.iter().map(|s| s.to_string()).collect() },
        ))
    }

    pub fn copy_file(from: &str, to: &str) -> Self {
        Self::new(Payload::json(OP_COPY_FILE, &TwoPaths { from: from.into(), to: to.into() }))
    }

    pub fn rename_file(from: &str, to: &str) -> Self {
        Self::new(Payload::json(OP_RENAME_FILE, &TwoPaths { from: from.into(), to: to.into() }))
    }

    pub fn delete_file(path: &str) -> Self {
        Self::new(Payload::json(OP_DELETE_FILE, &path))
    }

    pub fn sleep(ms: u64) -> Self {
        Self::new(Payload::json(OP_SLEEP, &ms))
    }

    /// Several steps run in order inside one workspace; the result is the
    /// last step's.
    pub fn sequence(steps: Vec<Payload>) -> Self {
        Self::new(Payload::json(OP_SEQUENCE, &steps))
    }

    pub fn with_staging(mut self, staging: StagingPlan) -> Self {
        self.staging = staging;
        self
    }

    pub fn into_spec(self) -> JobSpec {
        JobSpec { staging: self.staging, ..JobSpec::new(self.payload) }
    }
}

fn params<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<T, String> {
    serde_json::from_slice(bytes).map_err(|e| format!("bad parameters: {e}"))
}

fn inside(ws: &Path, name: &str) -> Result<PathBuf, String> {
    validate_name(name).map_err(|e| e.to_string())?;
    Ok(ws.join(name))
}

fn run_process(ctx: &OpContext, p: RunProcess) -> Result<Vec<u8>, String> {
    let mut child = Command::new(&p.command)
        .args(&p.args)
        .current_dir(&ctx.workspace)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| format!("cannot start {}: {e}", p.command))?;
    let mut stdout = child.stdout.take().expect("piped");
    let mut stderr = child.stderr.take().expect("piped");
    let out_reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stdout.read_to_end(&mut buf);
        buf
    });
    let err_reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stderr.read_to_end(&mut buf);
        buf
    });
    let status = loop {
        if let Some(status) = child.try_wait().map_err(|e| e.to_string())? {
            break status;
        }
        if ctx.is_cancelled() {
            let _ = child.kill();
            let _ = child.wait();
            return Err("cancelled".into());
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    let out = out_reader.join().unwrap_or_default();
    let err = err_reader.join().unwrap_or_default();
    if !status.success() {
        return Err(format!("{} exited with {status}: {}", p.command, String::from_utf8_lossy(&err).trim()));
    }
    Ok(out)
}

fn sleep(ctx: &OpContext, ms: u64) -> Result<Vec<u8>, String> {
    let until = Instant::now() + Duration::from_millis(ms);
    while Instant::now() < until {
        if ctx.is_cancelled() {
            return Err("cancelled".into());
        }
        std::thread::sleep((until - Instant::now()).min(Duration::from_millis(10)));
    }
    Ok(Vec::new())
}

/// Plain iterative Fibonacci, `fib(0) = 0`.
pub fn fib(n: u32) -> u128 {
    let (mut a, mut b) = (0u128, 1u128);
    for _ in 0..n {
        let next = a.checked_add(b).expect("fib overflow");
        a = b;
        b = next;
    }
    a
}

pub(crate) fn register(r: &mut OperationRegistry) {
    r.register(OP_RUN_PROCESS, |ctx, p| run_process(ctx, params(p)?));
    r.register(OP_COPY_FILE, |ctx, p| {
        let t: TwoPaths = params(p)?;
        std::fs::copy(inside(&ctx.workspace, &t.from)?, inside(&ctx.workspace, &t.to)?).map_err(|e| e.to_string())?;
        Ok(Vec::new())
    });
    r.register(OP_RENAME_FILE, |ctx, p| {
        let t: TwoPaths = params(p)?;
        std::fs::rename(inside(&ctx.workspace, &t.from)?, inside(&ctx.workspace, &t.to)?)
            .map_err(|e| e.to_string())?;
        Ok(Vec::new())
    });
    r.register(OP_DELETE_FILE, |ctx, p| {
        let path: String = params(p)?;
        match std::fs::remove_file(inside(&ctx.workspace, &path)?) {
            Ok(()) => Ok(Vec::new()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e.to_string()),
        }
    });
    r.register(OP_SLEEP, |ctx, p| sleep(ctx, params(p)?));
    r.register(OP_FIB, |_, p| {
        let n: u32 = params(p)?;
        if n > 186 {
            return Err(format!("fib({n}) does not fit in 128 bits"));
        }
        Ok(fib(n).to_string().into_bytes())
    });
    r.register(OP_FAIL, |_, p| Err(String::from_utf8_lossy(p).into_owned()));
    r.register(OP_SEQUENCE, |ctx, p| {
        let steps: Vec<Payload> = params(p)?;
        let registry = OperationRegistry::with_builtins();
        let mut last = Vec::new();
        for step in steps {
            if step.operation == OP_SEQUENCE {
                return Err("sequences do not nest".into());
            }
            last = registry.invoke(&step.operation, ctx, &step.params)?;
        }
        Ok(last)
    });
}

/// Submit every task and wait for all of them. Failures are per task.
pub async fn run_tasks(
    app: &mut Application,
    tasks: Vec<TaskUnit>,
    timeout: Duration,
) -> Result<Vec<UnitStatus>, ClientError> {
    app.require_model(Model::Task)?;
    let ids: Vec<_> = tasks.into_iter().map(|t| app.add_unit(t.into_spec())).collect::<Result<_, _>>()?;
    app.submit().await?;
    let states = app.wait(timeout).await?;
    Ok(ids.iter().map(|id| states[id].clone()).collect())
}

/// Submit and return without waiting.
pub async fn submit_and_forget(app: &mut Application, tasks: Vec<TaskUnit>) -> Result<Vec<crate::ids::JobId>, ClientError> {
    app.require_model(Model::Task)?;
    let ids: Vec<_> = tasks.into_iter().map(|t| app.add_unit(t.into_spec())).collect::<Result<_, _>>()?;
    app.submit().await?;
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::ChannelRegistry;

    fn ctx(dir: &Path) -> OpContext {
        OpContext::new(dir.to_path_buf(), ChannelRegistry::with_builtins())
    }

    #[test]
    fn fib_matches_recurrence() {
        let mut v = vec![0u128, 1];
        for i in 2..50 {
            v.push(v[i - 1] + v[i - 2]);
        }
        for (n, want) in v.iter().enumerate() {
            assert_eq!(fib(n as u32), *want);
        }
        assert_eq!(fib(10), 55);
    }

    #[test]
    fn file_operations_stay_in_workspace() {
        let dir = tempfile::tempdir().unwrap();
        let reg = OperationRegistry::with_builtins();
        let c = ctx(dir.path());
        std::fs::write(dir.path().join("a"), b"x").unwrap();
        let t = TaskUnit::copy_file("a", "b");
        reg.invoke(&t.payload.operation, &c, &t.payload.params).unwrap();
        let t = TaskUnit::rename_file("b", "c");
        reg.invoke(&t.payload.operation, &c, &t.payload.params).unwrap();
        assert_eq!(std::fs::read(dir.path().join("c")).unwrap(), b"x");
        let t = TaskUnit::delete_file("c");
        reg.invoke(&t.payload.operation, &c, &t.payload.params).unwrap();
        reg.invoke(&t.payload.operation, &c, &t.payload.params).unwrap();
        let t = TaskUnit::copy_file("a", "../escape");
        assert!(reg.invoke(&t.payload.operation, &c, &t.payload.params).is_err());
    }

    #[test]
    fn run_process_captures_stdout_and_fails_on_nonzero() {
        let dir = tempfile::tempdir().unwrap();
        let reg = OperationRegistry::with_builtins();
        let t = TaskUnit::run_process("echo", &["7"]);
        assert_eq!(reg.invoke(&t.payload.operation, &ctx(dir.path()), &t.payload.params).unwrap(), b"7\n");
        let t = TaskUnit::run_process("sh", &["-c", "exit 3"]);
        assert!(reg.invoke(&t.payload.operation, &ctx(dir.path()), &t.payload.params).is_err());
    }

    #[test]
    fn sequence_runs_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let reg = OperationRegistry::with_builtins();
        let t = TaskUnit::sequence(vec![
            TaskUnit::run_process("sh", &["-c", "echo hi > f"]).payload,
            TaskUnit::run_process("cat", &["f"]).payload,
        ]);
        assert_eq!(reg.invoke(&t.payload.operation, &ctx(dir.path()), &t.payload.params).unwrap(), b"hi\n");
    }
}
