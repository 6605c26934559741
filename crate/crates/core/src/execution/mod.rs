//! Scheduling service (central queue, matchmaking, dispatch, retries) and
//! execution service (per-node workspaces, run, collect).

mod executor;
mod job;
mod ops;
mod scheduler;
mod service;

pub use executor::{
    executor_slots, DispatchRequest, ExecAbort, ExecutorService, ExecutorStatus, KIND_DISPATCH, KIND_EXEC_ABORT,
    KIND_EXEC_STATUS,
};
pub use job::{
    AppState, ApplicationRecord, ExecError, JobDescriptor, JobEvent, JobSpec, JobState, Model, Payload,
    TerminalRecord, DEFAULT_MAX_ATTEMPTS,
};
pub use ops::{OpContext, OperationFn, OperationRegistry};
pub use scheduler::{
    DispatchDecision, ExecReport, ExecutorSlotState, ReportStatus, RunningAt, SchedulerCore, THROUGHPUT_WINDOW_MS,
};
pub use service::{
    AbortJob, AppRef, ApplicationView, CreateApp, EventsPage, EventsRequest, SchedulerService, SchedulerStats,
    SubmitAck, SubmitJobs, UsageReport, KIND_ABORT, KIND_APP_CREATE, KIND_APP_GET, KIND_APP_STOP, KIND_EVENTS,
    KIND_JOB, KIND_REPORT, KIND_STATS, KIND_SUBMIT, KIND_USAGE,
};
