use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::template::{Combination, SweepError, TaskTemplate};
use crate::appmodel::{Application, ClientError};
use crate::execution::{JobSpec, JobState, Model};
use crate::ids::JobId;
use crate::storage::{DataChannelSpec, FileDescriptor, StagingPlan};

#[derive(Debug, thiserror::Error)]
pub enum SweepRunError {
    #[error(transparent)]
    Template(#[from] SweepError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("template declares files but no channel was given")]
    NoChannel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub index: usize,
    pub parameters: Vec<(String, String)>,
    pub job_id: JobId,
    pub state: JobState,
    pub failure_cause: Option<String>,
    pub outputs: Vec<FileDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
    pub counts: BTreeMap<JobState, usize>,
}

/// Snapshot handed to the progress callback.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepProgress {
    pub total: usize,
    pub counts: BTreeMap<JobState, usize>,
}

impl SweepProgress {
    pub fn terminal(&self) -> usize {
        self.counts.iter().filter(|(s, _)| s.is_terminal()).map(|(_, n)| n).sum()
    }
}

/// Job spec for one combination. Inputs come from `channel`; outputs go to
/// a per-combination directory under it.
pub fn combination_spec(
    combo: &Combination,
    app: &Application,
    channel: Option<&DataChannelSpec>,
) -> Result<JobSpec, SweepRunError> {
    let mut staging = StagingPlan::default();
    if !combo.inputs.is_empty() || !combo.outputs.is_empty() {
        let channel = channel.ok_or(SweepRunError::NoChannel)?;
        staging.inputs = combo.inputs.iter().map(|n| FileDescriptor::input(n, channel.clone())).collect();
        let out = channel.child(&format!("sweep/{}/{}", app.id(), combo.index));
        staging.outputs = combo.outputs.iter().map(|n| FileDescriptor::output(n, out.clone())).collect();
    }
    Ok(JobSpec { staging, ..JobSpec::new(combo.task().payload) })
}

fn counts(app: &Application, ids: &[JobId]) -> BTreeMap<JobState, usize> {
    let mut m = BTreeMap::new();
    for id in ids {
        if let Some(u) = app.unit(*id) {
            *m.entry(u.state).or_insert(0) += 1;
        }
    }
    m
}

/// Expand `template`, submit one task per combination and wait for all.
pub async fn run_sweep(
    app: &mut Application,
    template: &TaskTemplate,
    channel: Option<&DataChannelSpec>,
    timeout: Duration,
    mut progress: impl FnMut(&SweepProgress),
) -> Result<SweepReport, SweepRunError> {
    app.require_model(Model::Task)?;
    let combos = template.expand()?;
    let mut ids = Vec::with_capacity(combos.len());
    for c in &combos {
        let spec = combination_spec(c, app, channel)?;
        ids.push(app.add_unit(spec)?);
    }
    app.submit().await?;

    let deadline = tokio::time::Instant::now() + timeout;
    let mut last = None;
    loop {
        app.poll_events().await?;
        let p = SweepProgress { total: ids.len(), counts: counts(app, &ids) };
        if last.as_ref() != Some(&p) {
            progress(&p);
        }
        let done = p.terminal() == p.total;
        last = Some(p);
        if done {
            break;
        }
        if tokio::time::Instant::now() >= deadline {
            return Err(ClientError::Timeout.into());
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }

    let entries = combos
        .into_iter()
        .zip(&ids)
        .map(|(c, id)| {
            let u = app.unit(*id).expect("unit tracked");
            SweepEntry {
                index: c.index,
                parameters: c.parameters,
                job_id: *id,
                state: u.state,
                failure_cause: u.failure_cause.clone(),
                outputs: u.outputs.clone(),
            }
        })
        .collect();
    Ok(SweepReport { entries, counts: counts(app, &ids) })
}
