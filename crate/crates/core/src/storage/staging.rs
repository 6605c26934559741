use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::channel::{validate_name, ChannelRegistry, Direction, FileDescriptor, StorageError};
use super::disk::sha256_hex;

/// Files a job needs before it runs and produces when it finishes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct StagingPlan {
    #[serde(default)]
    pub inputs: Vec<FileDescriptor>,
    #[serde(default)]
    pub outputs: Vec<FileDescriptor>,
}

impl StagingPlan {
    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty() && self.outputs.is_empty()
    }

    /// Logical names must be valid and unique across inputs and outputs.
    pub fn validate(&self) -> Result<(), StorageError> {
        let mut seen = HashSet::new();
        for fd in self.inputs.iter().chain(&self.outputs) {
            validate_name(&fd.logical_name)?;
            if !seen.insert(fd.logical_name.as_str()) {
                return Err(StorageError::InvalidName(format!("duplicate logical name {}", fd.logical_name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("staging {file} failed: {cause}")]
pub struct StageFailure {
    pub file: String,
    pub cause: StorageError,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageOutReport {
    pub uploaded: Vec<FileDescriptor>,
    /// Declared outputs the job never produced.
    pub missing: Vec<String>,
}

/// Materialize every input of `plan` inside `workspace`, verifying digests.
pub fn stage_in(plan: &StagingPlan, workspace: &Path, registry: &ChannelRegistry) -> Result<(), StageFailure> {
    plan.validate().map_err(|cause| StageFailure { file: String::new(), cause })?;
    for input in &plan.inputs {
        let fail = |cause| StageFailure { file: input.logical_name.clone(), cause };
        let client = registry.client(&input.channel).map_err(fail)?;
        let content = client.get(&input.logical_name).map_err(fail)?;
        if !input.digest.is_empty() && sha256_hex(&content) != input.digest {
            return Err(fail(StorageError::DigestMismatch(input.logical_name.clone())));
        }
        let path = workspace.join(&input.logical_name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| fail(e.into()))?;
        }
        fs::write(&path, &content).map_err(|e| fail(e.into()))?;
    }
    Ok(())
}

/// Upload every declared output found in `workspace`.
pub fn stage_out(plan: &StagingPlan, workspace: &Path, registry: &ChannelRegistry) -> Result<StageOutReport, StageFailure> {
    let mut report = StageOutReport::default();
    for output in &plan.outputs {
        let fail = |cause| StageFailure { file: output.logical_name.clone(), cause };
        let path = workspace.join(validate_name(&output.logical_name).map_err(fail)?);
        let content = match fs::read(&path) {
            Ok(c) => c,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                report.missing.push(output.logical_name.clone());
                continue;
            }
            Err(e) => return Err(fail(e.into())),
        };
        let client = registry.client(&output.channel).map_err(fail)?;
        let mut fd = client.put(&output.logical_name, &content).map_err(fail)?;
        fd.direction = Direction::Output;
        report.uploaded.push(fd);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::{DataChannelSpec, ServerOptions};

    fn local(dir: &Path) -> DataChannelSpec {
        DataChannelSpec::new("local", "", "", &dir.to_string_lossy())
    }

    #[test]
    fn two_inputs_are_materialized() {
        let store = tempfile::tempdir().unwrap();
        let ws = tempfile::tempdir().unwrap();
        let reg = ChannelRegistry::with_builtins();
        let client = reg.client(&local(store.path())).unwrap();
        let plan = StagingPlan {
            inputs: vec![client.put("a.txt", b"A").unwrap(), client.put("sub/b.txt", b"B").unwrap()],
            outputs: vec![],
        };
        stage_in(&plan, ws.path(), &reg).unwrap();
        assert_eq!(fs::read(ws.path().join("a.txt")).unwrap(), b"A");
        assert_eq!(fs::read(ws.path().join("sub/b.txt")).unwrap(), b"B");
    }

    #[test]
    fn missing_outputs_are_reported() {
        let store = tempfile::tempdir().unwrap();
        let ws = tempfile::tempdir().unwrap();
        let reg = ChannelRegistry::with_builtins();
        fs::write(ws.path().join("made"), b"ok").unwrap();
        let plan = StagingPlan {
            inputs: vec![],
            outputs: vec![
                FileDescriptor::output("made", local(store.path())),
                FileDescriptor::output("never", local(store.path())),
            ],
        };
        let report = stage_out(&plan, ws.path(), &reg).unwrap();
        assert_eq!(report.uploaded.len(), 1);
        assert_eq!(report.uploaded[0].direction, Direction::Output);
        assert_eq!(report.missing, vec!["never"]);
    }

    #[test]
    fn stale_digest_fails_staging() {
        let store = tempfile::tempdir().unwrap();
        let ws = tempfile::tempdir().unwrap();
        let reg = ChannelRegistry::with_builtins();
        let client = reg.client(&local(store.path())).unwrap();
        let mut fd = client.put("a", b"original").unwrap();
        fd.digest = sha256_hex(b"something else");
        let err = stage_in(&StagingPlan { inputs: vec![fd], outputs: vec![] }, ws.path(), &reg).unwrap_err();
        assert_eq!(err.cause, StorageError::DigestMismatch("a".into()));
    }

    #[test]
    fn duplicate_names_are_invalid() {
        let spec = DataChannelSpec::new("local", "", "", "tmp");
        let plan = StagingPlan {
            inputs: vec![FileDescriptor::input("x", spec.clone())],
            outputs: vec![FileDescriptor::output("x", spec)],
        };
        assert!(plan.validate().is_err());
    }

    #[test]
    fn stage_through_aftp() {
        let root = tempfile::tempdir().unwrap();
        let ws = tempfile::tempdir().unwrap();
        let reg = ChannelRegistry::with_builtins();
        let srv = reg
            .serve("aftp", &ServerOptions { root_dir: root.path().into(), ..Default::default() })
            .unwrap();
        let client = reg.client(&srv.spec()).unwrap();
        let plan = StagingPlan { inputs: vec![client.put("data.bin", &[1, 2, 3]).unwrap()], outputs: vec![] };
        stage_in(&plan, ws.path(), &reg).unwrap();
        assert_eq!(fs::read(ws.path().join("data.bin")).unwrap(), [1, 2, 3]);
        srv.shutdown();
    }
}
