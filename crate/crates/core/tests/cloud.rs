mod common;

use std::time::Duration;

use cirrus_core::models::{
    fib, run_mapreduce, run_tasks, InputFormat, MapReduceConfig, Mapper, RemoteThread, Reducer, TaskUnit,
    ThreadError, ThreadState, OP_FAIL, OP_FIB,
};
use cirrus_core::reservation::{NegotiationOutcome, ReservationRequest};
use cirrus_core::storage::{FileDescriptor, StagingPlan};
use cirrus_core::sweep::{run_sweep, TaskTemplate};
use cirrus_core::transversal::Credentials;
use cirrus_core::{ClientError, CloudClient, JobSpec, JobState, Model, Payload};
use common::{Cloud, CloudOptions};

const WAIT: Duration = Duration::from_secs(20);

#[tokio::test(flavor = "multi_thread")]
async fn fib_tasks_return_their_values() {
    let cloud = Cloud::start(CloudOptions::default()).await;
    let mut app = cloud.client.create_application(Model::Task, "fib", vec![]).await.unwrap();
    let tasks = (0..10u32).map(|n| TaskUnit::new(Payload::json(OP_FIB, &(n * 10)))).collect();
    let statuses = run_tasks(&mut app, tasks, WAIT).await.unwrap();
    for (n, s) in statuses.iter().enumerate() {
        assert_eq!(s.state, JobState::Completed);
        let want = fib(n as u32 * 10).to_string();
        assert_eq!(s.result.as_deref(), Some(want.as_bytes()));
    }
    cloud.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn failing_job_uses_its_attempts_then_fails() {
    let cloud = Cloud::start(CloudOptions::default()).await;
    let mut app = cloud.client.create_application(Model::Task, "fail", vec![]).await.unwrap();
    let spec = JobSpec { max_attempts: Some(2), ..JobSpec::new(Payload::new(OP_FAIL, b"boom".to_vec())) };
    let id = app.add_unit(spec).unwrap();
    let states = app.wait_for(&[id], WAIT).await.unwrap();
    assert_eq!(states[&id].state, JobState::Failed);
    assert!(states[&id].failure_cause.as_deref().unwrap().contains("boom"));
    let job = cloud.client.job(id).await.unwrap();
    assert_eq!(job.attempts, 2);
    cloud.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn staged_copy_uploads_its_output() {
    let cloud = Cloud::start(CloudOptions::default()).await;
    let spec = cloud.storage_spec().await;
    let inputs = common::upload(&spec, vec![("in.txt".into(), b"payload bytes".to_vec())]).await;
    let mut app = cloud.client.create_application(Model::Task, "copy", vec![]).await.unwrap();
    let out = spec.child("results");
    let task = TaskUnit::copy_file("in.txt", "out.txt")
        .with_staging(StagingPlan { inputs, outputs: vec![FileDescriptor::output("out.txt", out)] });
    let statuses = run_tasks(&mut app, vec![task], WAIT).await.unwrap();
    assert_eq!(statuses[0].state, JobState::Completed);
    assert_eq!(statuses[0].outputs.len(), 1);
    assert_eq!(common::download(&statuses[0].outputs[0]).await, b"payload bytes");
    cloud.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn missing_input_fails_staging() {
    let cloud = Cloud::start(CloudOptions::default()).await;
    let spec = cloud.storage_spec().await;
    let mut app = cloud.client.create_application(Model::Task, "missing", vec![]).await.unwrap();
    let task = TaskUnit::copy_file("nope.txt", "out.txt").with_staging(StagingPlan {
        inputs: vec![FileDescriptor::input("nope.txt", spec)],
        outputs: vec![],
    });
    let mut spec = task.into_spec();
    spec.max_attempts = Some(1);
    let id = app.add_unit(spec).unwrap();
    let states = app.wait_for(&[id], WAIT).await.unwrap();
    assert_eq!(states[&id].state, JobState::Failed);
    assert!(states[&id].failure_cause.as_deref().unwrap().starts_with("StageFailure"));
    cloud.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn aborting_a_running_job() {
    let cloud = Cloud::start(CloudOptions::default()).await;
    let mut app = cloud.client.create_application(Model::Task, "abort", vec![]).await.unwrap();
    let id = app.add_unit(TaskUnit::sleep(30_000).into_spec()).unwrap();
    app.submit().await.unwrap();
    for _ in 0..200 {
        if cloud.client.job(id).await.unwrap().state == JobState::Running {
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    app.abort_unit(id).await.unwrap();
    let states = app.wait_for(&[id], WAIT).await.unwrap();
    assert_eq!(states[&id].state, JobState::Aborted);
    cloud.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn remote_thread_joins_with_its_result() {
    let cloud = Cloud::start(CloudOptions::default()).await;
    let mut app = cloud.client.create_application(Model::Thread, "threads", vec![]).await.unwrap();
    let mut t = RemoteThread::new(Payload::json(OP_FIB, &90u32));
    t.start(&mut app).await.unwrap();
    assert!(matches!(t.start(&mut app).await, Err(ThreadError::AlreadyStarted)));
    let out = t.join(&mut app, WAIT).await.unwrap();
    assert_eq!(out, fib(90).to_string().into_bytes());
    assert_eq!(t.state(), ThreadState::Finished);

    let mut failing = RemoteThread::new(Payload::new(OP_FAIL, b"bad input".to_vec()));
    failing.start(&mut app).await.unwrap();
    assert!(matches!(failing.join(&mut app, WAIT).await, Err(ThreadError::Remote(m)) if m.contains("bad input")));
    cloud.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn thread_join_before_start_and_wrong_model() {
    let cloud = Cloud::start(CloudOptions::default()).await;
    let mut tasks = cloud.client.create_application(Model::Task, "tasks", vec![]).await.unwrap();
    let mut t = RemoteThread::new(TaskUnit::sleep(1).payload);
    assert!(matches!(t.join(&mut tasks, WAIT).await, Err(ThreadError::NotStarted)));
    assert!(matches!(
        t.start(&mut tasks).await,
        Err(ThreadError::Client(ClientError::WrongModel { .. }))
    ));
    cloud.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn mapreduce_over_empty_input_gives_empty_partitions() {
    let cloud = Cloud::start(CloudOptions::default()).await;
    let spec = cloud.storage_spec().await;
    let inputs = common::upload(&spec.child("empty-in"), vec![("e.txt".into(), Vec::new())]).await;
    let mut app = cloud.client.create_application(Model::Mapreduce, "empty", vec![]).await.unwrap();
    let config = MapReduceConfig {
        mapper: Mapper::Wordcount,
        reducer: Reducer::Sum,
        reducers: 3,
        input_format: InputFormat::Text,
        output: spec.child("empty-out"),
        max_attempts: None,
    };
    let outcome = run_mapreduce(&mut app, &inputs, &config, WAIT).await.unwrap();
    assert_eq!(outcome.outputs.len(), 3);
    assert_eq!(outcome.pairs, 0);
    for fd in &outcome.outputs {
        assert!(common::download(fd).await.is_empty());
    }
    cloud.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn mapreduce_needs_the_mapreduce_model() {
    let cloud = Cloud::start(CloudOptions::default()).await;
    let spec = cloud.storage_spec().await;
    let mut app = cloud.client.create_application(Model::Task, "wrong", vec![]).await.unwrap();
    let config = MapReduceConfig {
        mapper: Mapper::Identity,
        reducer: Reducer::Identity,
        reducers: 1,
        input_format: InputFormat::Kv,
        output: spec,
        max_attempts: None,
    };
    assert!(run_mapreduce(&mut app, &[], &config, WAIT).await.is_err());
    cloud.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn sweep_stages_files_per_combination() {
    let cloud = Cloud::start(CloudOptions::default()).await;
    let spec = cloud.storage_spec().await;
    common::upload(&spec, vec![("seed.txt".into(), b"seed".to_vec())]).await;
    let template = TaskTemplate::parse(
        r#"
name = "copies"
executable = "cp"
inputs = ["seed.txt"]
outputs = ["copy-${n}.txt"]

[[domain]]
name = "n"
kind = "range"
start = 1
step = 1
count = 3

[[command]]
op = "copy_file"
from = "seed.txt"
to = "copy-${n}.txt"
"#,
    )
    .unwrap();
    let mut app = cloud.client.create_application(Model::Task, "copies", vec![]).await.unwrap();
    let mut seen = Vec::new();
    let report = run_sweep(&mut app, &template, Some(&spec), WAIT, |p| seen.push(p.terminal())).await.unwrap();
    assert_eq!(report.entries.len(), 3);
    assert_eq!(seen.last(), Some(&3));
    for e in &report.entries {
        assert_eq!(e.state, JobState::Completed, "{:?}", e.failure_cause);
        assert_eq!(e.outputs.len(), 1);
        assert_eq!(e.outputs[0].logical_name, format!("copy-{}.txt", e.parameters[0].1));
        assert_eq!(common::download(&e.outputs[0]).await, b"seed");
    }
    cloud.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn event_subscription_sees_every_transition() {
    let cloud = Cloud::start(CloudOptions::default()).await;
    let mut app = cloud.client.create_application(Model::Task, "events", vec![]).await.unwrap();
    let mut sub = app.subscribe(Duration::from_millis(20));
    let id = app.add_unit(TaskUnit::sleep(20).into_spec()).unwrap();
    app.submit().await.unwrap();
    let mut states = Vec::new();
    while let Ok(Some(ev)) = tokio::time::timeout(WAIT, sub.recv()).await {
        assert_eq!(ev.job_id, id);
        states.push(ev.state);
        if ev.state.is_terminal() {
            break;
        }
    }
    assert_eq!(states.first(), Some(&JobState::Queued));
    assert_eq!(states.last(), Some(&JobState::Completed));
    let seqs: Vec<_> = states.windows(2).map(|w| w[0] < w[1]).collect();
    assert!(seqs.iter().all(|b| *b), "out of order: {states:?}");
    cloud.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn negotiation_over_the_wire_follows_counter_offers() {
    let cloud = Cloud::start(CloudOptions { workers: 1, storage: false, ..Default::default() }).await;
    let base = cirrus_core::ids::now_secs() + 3600;
    let first = cloud.client.request_reservation(ReservationRequest::new("x", 1, base, base + 100, 100)).await.unwrap();
    assert!(matches!(first, NegotiationOutcome::Confirmed { .. }));
    let second = cloud.client.request_reservation(ReservationRequest::new("x", 1, base, base + 100, 50)).await.unwrap();
    let NegotiationOutcome::Counter { offer } = second else { panic!("expected a counter-offer, got {second:?}") };
    assert_eq!(offer.proposed_window.start, base + 100);
    let done = cloud.client.accept_counter(offer.clone()).await.unwrap();
    let NegotiationOutcome::Confirmed { reservation } = done else { panic!("expected confirmation, got {done:?}") };
    assert_eq!(reservation.window, offer.proposed_window);

    let too_many = cloud.client.request_reservation(ReservationRequest::new("x", 2, base, base + 100, 10)).await.unwrap();
    assert!(matches!(too_many, NegotiationOutcome::Rejected { .. }));
    assert_eq!(cloud.client.reservations().await.unwrap().len(), 2);
    cloud.client.cancel_reservation(reservation.reservation_id).await.unwrap();
    cloud.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn unreachable_master_is_a_connection_failure() {
    let port = common::free_port();
    let client = CloudClient::new(format!("127.0.0.1:{port}"), Credentials::anonymous());
    assert!(matches!(client.nodes().await, Err(ClientError::ConnectionFailed { .. })));
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_application_is_not_found() {
    let cloud = Cloud::start(CloudOptions { workers: 1, storage: false, ..Default::default() }).await;
    let err = cloud.client.application_view(cirrus_core::AppId::new()).await.unwrap_err();
    assert!(matches!(err, ClientError::NotFound(_)));
    cloud.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn graceful_leave_removes_the_record() {
    let mut cloud = Cloud::start(CloudOptions { workers: 1, storage: false, ..Default::default() }).await;
    let w = cloud.workers.pop().unwrap();
    let id = w.node_id();
    w.shutdown().await;
    assert!(cloud.records().await.iter().all(|r| r.node_id != id));
    cloud.stop().await;
}
