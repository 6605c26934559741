//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::future::Future;
use std::io::{Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cirrus_core::container::{encode, CallError, Container};
use cirrus_core::directory::{LivenessState, KIND_REGISTER};
use cirrus_core::execution::{DispatchRequest, JobDescriptor, KIND_DISPATCH};
use cirrus_core::ids::{now_secs, MessageId};
use cirrus_core::models::{
    run_mapreduce, run_tasks, InputFormat, MapReduceConfig, Mapper, Reducer, TaskUnit,
};
use cirrus_core::reservation::{
    NegotiationOutcome, ReservationBook, ReservationRequest, TimeWindow,
};
use cirrus_core::storage::{
    AftpClient, AftpServer, ChannelClient, ChannelServer, ServerOptions, StorageError,
};
use cirrus_core::sweep::{run_sweep, TaskTemplate};
use cirrus_core::transversal::persistence::{DurableStore, PersistenceProvider, VolatileStore};
use cirrus_core::transversal::{price, Credentials, Tariff, UsageRecord};
use cirrus_core::{AppId, ClientError, JobId, JobState, Model, NodeId};
use common::{Cloud, CloudOptions};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1

/// Lines of words drawn from a fixed vocabulary, with uneven spacing.
fn corpus(min_len: usize, seed: u64) -> Vec<u8> {
    let mut rng = StdRng::seed_from_u64(seed);
    let vocab: Vec<String> = (0..600)
        .map(|_| {
            let n = rng.gen_range(1..10);
            (0..n).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(min_len + 128);
    while out.len() < min_len {
        let words = rng.gen_range(0..14);
        for i in 0..words {
            if i > 0 {
                out.extend_from_slice(if rng.gen_bool(0.1) { b" \t " } else { b" " });
            }
            out.extend_from_slice(vocab[rng.gen_range(0..vocab.len())].as_bytes());
        }
        out.push(b'\n');
    }
    out
}

/// Split at line boundaries into roughly `parts` pieces.
fn split_lines(bytes: &[u8], parts: usize) -> Vec<Vec<u8>> {
    let target = bytes.len() / parts + 1;
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for line in bytes.split_inclusive(|b| *b == b'\n') {
        cur.extend_from_slice(line);
        if cur.len() >= target {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

async fn mapreduce_wordcount() -> Outcome {
    let cloud = Cloud::start(CloudOptions { workers: 2, slots: 2, ..Default::default() }).await;
    let text = corpus(1 << 20, 7);
    let spec = cloud.storage_spec().await;
    let files: Vec<(String, Vec<u8>)> =
        split_lines(&text, 8).into_iter().enumerate().map(|(i, b)| (format!("part-{i}.txt"), b)).collect();
    let inputs = common::upload(&spec.child("wc-in"), files).await;

    let started = Instant::now();
    let mut app = cloud.client.create_application(Model::Mapreduce, "wordcount", vec![]).await.map_err(|e| e.to_string())?;
    let config = MapReduceConfig {
        mapper: Mapper::Wordcount,
        reducer: Reducer::Sum,
        reducers: 2,
        input_format: InputFormat::Text,
        output: spec.child("wc-out"),
        max_attempts: None,
    };
    let outcome = run_mapreduce(&mut app, &inputs, &config, Duration::from_secs(30)).await.map_err(|e| e.to_string())?;
    let mut got: HashMap<(String, String), usize> = HashMap::new();
    for fd in &outcome.outputs {
        let bytes = common::download(fd).await;
        for line in String::from_utf8(bytes).map_err(|e| e.to_string())?.lines() {
            let (k, v) = line.split_once('\t').ok_or_else(|| format!("malformed output line {line:?}"))?;
            *got.entry((k.to_string(), v.to_string())).or_default() += 1;
        }
    }
    let elapsed = started.elapsed();

    let mut counts: HashMap<&str, u64> = HashMap::new();
    for w in std::str::from_utf8(&text).unwrap().split_ascii_whitespace() {
        *counts.entry(w).or_default() += 1;
    }
    let want: HashMap<(String, String), usize> =
        counts.iter().map(|(w, n)| ((w.to_string(), n.to_string()), 1)).collect();
    cloud.stop().await;

    check(outcome.outputs.len() == 2, || format!("{} output files", outcome.outputs.len()))?;
    check(got == want, || format!("output has {} lines, oracle {}", got.len(), want.len()))?;
    check(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("{} distinct words over {} bytes match the oracle in {:.2?}", want.len(), text.len(), elapsed))
}

// ---------------------------------------------------------------- 2

const GRID: &str = r#"
name = "grid"
executable = "echo"

[[domain]]
name = "a"
kind = "range"
start = 0
step = 1
count = 4

[[domain]]
name = "b"
kind = "enumeration"
values = ["x", "y", "z", "u", "v"]

[[domain]]
name = "c"
kind = "range"
start = 0.5
step = 0.25
count = 6

[[command]]
op = "run_process"
command = "echo"
args = ["${a}", "${b}", "${c}"]
"#;

async fn sweep_cartesian() -> Outcome {
    let template = TaskTemplate::parse(GRID).map_err(|e| e.to_string())?;
    let combos = template.expand().map_err(|e| e.to_string())?;

    let a = ["0", "1", "2", "3"];
    let b = ["x", "y", "z", "u", "v"];
    let c = ["0.5", "0.75", "1", "1.25", "1.5", "1.75"];
    let mut product = BTreeSet::new();
    for x in a {
        for y in b {
            for z in c {
                product.insert(vec![x.to_string(), y.to_string(), z.to_string()]);
            }
        }
    }
    let tuples: BTreeSet<Vec<String>> =
        combos.iter().map(|c| c.parameters.iter().map(|(_, v)| v.clone()).collect()).collect();
    check(combos.len() == 120, || format!("{} combinations", combos.len()))?;
    check(tuples == product, || "combination tuples differ from the cartesian product".into())?;
    for combo in &combos {
        let residual = combo.commands.iter().any(|p| String::from_utf8_lossy(&p.params).contains("${"));
        check(!residual, || format!("placeholder left in combination {}", combo.index))?;
    }

    let cloud = Cloud::start(CloudOptions { workers: 2, slots: 4, ..Default::default() }).await;
    let mut app = cloud.client.create_application(Model::Task, "grid", vec![]).await.map_err(|e| e.to_string())?;
    let report = run_sweep(&mut app, &template, None, Duration::from_secs(60), |_| {}).await.map_err(|e| e.to_string())?;
    let mut outputs = BTreeSet::new();
    for e in &report.entries {
        check(e.state == JobState::Completed, || format!("combination {} ended {:?}", e.index, e.state))?;
        let result = app.unit(e.job_id).and_then(|u| u.result.clone()).unwrap_or_default();
        let words: Vec<String> = String::from_utf8_lossy(&result).split_whitespace().map(str::to_string).collect();
        outputs.insert(words);
    }
    cloud.stop().await;
    check(report.entries.len() == 120, || format!("{} tasks ran", report.entries.len()))?;
    check(outputs == product, || "task outputs differ from the cartesian product".into())?;
    Ok("120 combinations equal the 4x5x6 product, 120 tasks completed with matching output".into())
}

// ---------------------------------------------------------------- 3 and 4

const SLOTS: i64 = 64;
const MAX_ROUNDS: u32 = 3;

struct Instance {
    book: ReservationBook,
    nodes: Vec<NodeId>,
    /// busy[n][t] for t in 0..3*SLOTS.
    busy: Vec<Vec<bool>>,
    req: ReservationRequest,
}

fn random_instance(rng: &mut StdRng) -> Instance {
    let n = rng.gen_range(1..=4usize);
    let nodes: Vec<NodeId> = (1..=n as u128).map(NodeId::from_u128).collect();
    let mut book = ReservationBook::new(MAX_ROUNDS, SLOTS);
    let priors = rng.gen_range(0..=6);
    for _ in 0..priors {
        let k = rng.gen_range(1..=n);
        let mut subset = nodes.clone();
        while subset.len() > k {
            subset.remove(rng.gen_range(0..subset.len()));
        }
        let d = rng.gen_range(1..=20);
        let s = rng.gen_range(0..SLOTS - d);
        let count = rng.gen_range(1..=k) as u32;
        let _ = book.request(&ReservationRequest::new("prior", count, s, s + d, d), &subset).unwrap();
    }
    let mut busy = vec![vec![false; 3 * SLOTS as usize]; n];
    for (i, node) in nodes.iter().enumerate() {
        for e in book.map().entries(*node) {
            for t in e.window.start..e.window.end {
                busy[i][t as usize] = true;
            }
        }
    }
    let d = rng.gen_range(1..=24);
    let earliest = rng.gen_range(0..SLOTS - d);
    let latest = rng.gen_range(earliest + d..=SLOTS);
    let mut req = ReservationRequest::new("user", rng.gen_range(1..=n as u32 + 1), earliest, latest, d);
    req.round = rng.gen_range(0..=MAX_ROUNDS);
    Instance { book, nodes, busy, req }
}

/// Every start slot in `[lo, hi - d]`, checked slot by slot.
fn oracle_first_fit(busy: &[Vec<bool>], count: u32, d: i64, lo: i64, hi: i64) -> Option<i64> {
    (lo..=hi - d).find(|&s| {
        let free = busy.iter().filter(|b| (s..s + d).all(|t| !b[t as usize])).count();
        free >= count as usize
    })
}

#[derive(Debug, PartialEq)]
enum Expected {
    Confirmed(i64),
    Counter(i64),
    Rejected,
}

fn oracle(inst: &Instance) -> Expected {
    let r = &inst.req;
    if let Some(s) = oracle_first_fit(&inst.busy, r.node_count, r.duration_s, r.earliest, r.latest) {
        return Expected::Confirmed(s);
    }
    if r.round >= MAX_ROUNDS {
        return Expected::Rejected;
    }
    match oracle_first_fit(&inst.busy, r.node_count, r.duration_s, r.earliest, r.latest + SLOTS) {
        Some(s) => Expected::Counter(s),
        None => Expected::Rejected,
    }
}

fn window_is_free(busy: &[Vec<bool>], nodes: &[NodeId], all: &[NodeId], w: &TimeWindow) -> bool {
    nodes.iter().all(|n| {
        let i = all.iter().position(|x| x == n).unwrap();
        (w.start..w.end).all(|t| !busy[i][t as usize])
    })
}

async fn reservation_oracle() -> Outcome {
    let mut rng = StdRng::seed_from_u64(31);
    let mut classes: BTreeMap<&str, usize> = BTreeMap::new();
    for i in 0..1000 {
        let mut inst = random_instance(&mut rng);
        let want = oracle(&inst);
        let got = inst.book.request(&inst.req, &inst.nodes).map_err(|e| format!("instance {i}: {e}"))?;
        let matches = match (&want, &got) {
            (Expected::Confirmed(s), NegotiationOutcome::Confirmed { reservation }) => {
                reservation.window.start == *s
                    && reservation.node_ids.len() == inst.req.node_count as usize
                    && window_is_free(&inst.busy, &reservation.node_ids, &inst.nodes, &reservation.window)
            }
            (Expected::Counter(s), NegotiationOutcome::Counter { offer }) => {
                offer.proposed_window.start == *s && offer.proposed_window.duration_s() == inst.req.duration_s
            }
            (Expected::Rejected, NegotiationOutcome::Rejected { .. }) => true,
            _ => false,
        };
        check(matches, || format!("instance {i}: oracle {want:?}, book {}", got.class()))?;
        *classes.entry(got.class()).or_default() += 1;
    }
    Ok(format!("1000/1000 match {classes:?}"))
}

async fn negotiation() -> Outcome {
    let mut rng = StdRng::seed_from_u64(32);
    let (mut eligible, mut confirmed, mut countered) = (0, 0, 0);
    while eligible < 1000 {
        let mut inst = random_instance(&mut rng);
        inst.req.round = 0;
        let r = &inst.req;
        if oracle_first_fit(&inst.busy, r.node_count, r.duration_s, r.earliest, r.latest + SLOTS).is_none() {
            continue;
        }
        eligible += 1;
        let mut outcome = inst.book.request(&inst.req, &inst.nodes).map_err(|e| e.to_string())?;
        let mut rounds = 0;
        while let NegotiationOutcome::Counter { offer } = outcome {
            countered += 1;
            rounds += 1;
            check(rounds <= MAX_ROUNDS, || "negotiation exceeded max_rounds".into())?;
            outcome = inst.book.accept_counter(&offer, &inst.nodes).map_err(|e| e.to_string())?;
        }
        match &outcome {
            NegotiationOutcome::Confirmed { reservation } => {
                check(window_is_free(&inst.busy, &reservation.node_ids, &inst.nodes, &reservation.window), || {
                    "confirmed window was not free".into()
                })?;
                confirmed += 1;
            }
            other => return Err(format!("feasible instance ended {}", other.class())),
        }
    }
    Ok(format!("{confirmed}/{eligible} feasible instances confirmed, {countered} via a counter-offer"))
}

// ---------------------------------------------------------------- 5

async fn membership() -> Outcome {
    let opts = CloudOptions { workers: 0, storage: false, ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    let master = Container::start(common::master_config(dir.path(), &opts)).await.map_err(|e| e.to_string())?;
    let mut workers = Vec::new();
    for i in 1..=4 {
        let c = common::worker_config(dir.path(), &format!("worker-{i}"), master.endpoint(), &opts);
        workers.push(Container::start(c).await.map_err(|e| e.to_string())?);
    }
    let started = Instant::now();
    let alive = |records: &[cirrus_core::directory::MembershipRecord]| {
        records.iter().filter(|r| r.state == LivenessState::Alive).count()
    };
    loop {
        let records = cirrus_core::directory::query_catalogue(&master, None).await.unwrap_or_default();
        if alive(&records) == 5 {
            break;
        }
        if started.elapsed() > Duration::from_secs(3) {
            return Err(format!("{} alive after 3 s", alive(&records)));
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let converged = started.elapsed();

    let victim = workers.pop().unwrap();
    let victim_id = victim.node_id();
    victim.kill();
    let killed = Instant::now();
    let dead = loop {
        let records = cirrus_core::directory::query_catalogue(&master, None).await.unwrap_or_default();
        if records.iter().any(|r| r.node_id == victim_id && r.state == LivenessState::Dead) {
            break killed.elapsed();
        }
        if killed.elapsed() > Duration::from_secs(6) {
            return Err("killed node never marked dead".into());
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    };
    for w in &workers {
        w.shutdown().await;
    }
    master.shutdown().await;
    check(converged < Duration::from_secs(1), || format!("5 alive after {converged:?}"))?;
    check(dead < Duration::from_secs(3), || format!("dead after {dead:?}"))?;
    Ok(format!("5 alive after {converged:.2?}, killed node dead after {dead:.2?}"))
}

// ---------------------------------------------------------------- 6

fn dispatch_of(app: AppId, scheduler: &str) -> Vec<u8> {
    let job = JobDescriptor::new(app, Model::Task, TaskUnit::sleep(1).payload);
    encode(&DispatchRequest {
        job,
        dispatch_id: MessageId::new(),
        attempt: 1,
        scheduler_endpoint: scheduler.to_string(),
        credentials: Credentials::anonymous(),
        channels: vec![],
    })
}

async fn exclusivity() -> Outcome {
    let cloud = Cloud::start(CloudOptions { workers: 1, slots: 8, storage: false, ..Default::default() }).await;
    let now = now_secs();
    let outcome = cloud
        .client
        .request_reservation(ReservationRequest::new("anonymous", 1, now, now + 120, 60))
        .await
        .map_err(|e| e.to_string())?;
    let NegotiationOutcome::Confirmed { reservation } = outcome else {
        return Err(format!("reservation {}", outcome.class()));
    };
    let node = reservation.node_ids[0];
    let mut owner = cloud.client.create_application(Model::Task, "owner", vec![]).await.map_err(|e| e.to_string())?;
    cloud.client.bind_reservation(reservation.reservation_id, owner.id()).await.map_err(|e| e.to_string())?;
    tokio::time::sleep(Duration::from_millis(600)).await;

    let master = cloud.master.endpoint().to_string();
    let mut refused = 0;
    let mut violations = Vec::new();
    for _ in 0..100 {
        match cloud.master.call(node, "executor", KIND_DISPATCH, dispatch_of(AppId::new(), &master)).await {
            Err(CallError::Remote(w)) if w.code == "Refused" => refused += 1,
            other => violations.push(format!("{other:?}")),
        }
    }
    let mut admitted = 0;
    for _ in 0..5 {
        if cloud.master.call(node, "executor", KIND_DISPATCH, dispatch_of(owner.id(), &master)).await.is_ok() {
            admitted += 1;
        }
    }

    // Through the scheduler: the owner's job runs, another application's waits.
    let statuses = run_tasks(&mut owner, vec![TaskUnit::sleep(10)], Duration::from_secs(10)).await.map_err(|e| e.to_string())?;
    let mut other = cloud.client.create_application(Model::Task, "other", vec![]).await.map_err(|e| e.to_string())?;
    let other_job = other.add_unit(TaskUnit::sleep(10).into_spec()).map_err(|e| e.to_string())?;
    other.submit().await.map_err(|e| e.to_string())?;
    tokio::time::sleep(Duration::from_millis(800)).await;
    let other_state = cloud.client.job(other_job).await.map_err(|e| e.to_string())?.state;
    cloud.stop().await;

    check(violations.is_empty(), || format!("{} non-owner dispatches not refused: {:?}", violations.len(), violations.first()))?;
    check(admitted == 5, || format!("{admitted}/5 owner dispatches admitted"))?;
    check(statuses[0].state == JobState::Completed, || format!("owner job ended {:?}", statuses[0].state))?;
    check(other_state == JobState::Queued, || format!("non-owner job is {other_state:?}"))?;
    Ok(format!("{refused}/100 non-owner dispatches refused, 5/5 owner dispatches admitted"))
}

// ---------------------------------------------------------------- 7

async fn restart_master(config: &cirrus_core::ContainerConfig) -> Result<Container, String> {
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        match Container::start(config.clone()).await {
            Ok(c) => return Ok(c),
            Err(_) if Instant::now() < deadline => {
                tokio::time::sleep(Duration::from_millis(50)).await;
            }
            Err(e) => return Err(e.to_string()),
        }
    }
}

async fn queue_and_kill(durable: bool) -> Result<(Cloud, AppId, Vec<JobId>), String> {
    let opts = CloudOptions { workers: 0, storage: false, durable, ..Default::default() };
    let cloud = Cloud::start(opts).await;
    let mut app = cloud.client.create_application(Model::Task, "queued", vec![]).await.map_err(|e| e.to_string())?;
    let mut ids = Vec::new();
    for _ in 0..20 {
        ids.push(app.add_unit(TaskUnit::sleep(50).into_spec()).map_err(|e| e.to_string())?);
    }
    app.submit().await.map_err(|e| e.to_string())?;
    let stats = cloud.client.scheduler_stats().await.map_err(|e| e.to_string())?;
    let queued = stats.jobs_by_state.get(&JobState::Queued).copied().unwrap_or(0);
    if queued != 20 {
        return Err(format!("{queued} jobs queued before the crash"));
    }
    cloud.master.kill();
    Ok((cloud, app.id(), ids))
}

async fn crash_recovery() -> Outcome {
    let (mut cloud, app_id, ids) = queue_and_kill(true).await?;
    cloud.master = restart_master(&cloud.master_config).await?;
    cloud.add_worker().await;
    let mut app = cloud.client.open_application(app_id).await.map_err(|e| e.to_string())?;
    let states = app.wait(Duration::from_secs(30)).await.map_err(|e| e.to_string())?;
    let terminal = ids.iter().filter(|id| states.get(id).is_some_and(|s| s.state.is_terminal())).count();
    let state_dir = cloud.master_config.persistence_dir.clone().unwrap();
    cloud.master.shutdown().await;
    for w in &cloud.workers {
        w.shutdown().await;
    }
    let snapshot = DurableStore::open(&state_dir).and_then(|s| s.restore()).map_err(|e| e.to_string())?.ok_or("no snapshot")?;
    let mut records: HashMap<JobId, usize> = HashMap::new();
    for t in &snapshot.terminal_log {
        *records.entry(t.job_id).or_default() += 1;
    }
    check(terminal == 20, || format!("{terminal}/20 jobs terminal after restart"))?;
    check(ids.iter().all(|id| records.get(id) == Some(&1)), || format!("terminal records per job: {records:?}"))?;

    let (mut cloud, app_id, _) = queue_and_kill(false).await?;
    cloud.master = restart_master(&cloud.master_config).await?;
    let restored = cloud.master.env().restored.is_some();
    let lookup = cloud.client.application_view(app_id).await;
    cloud.stop().await;
    check(!restored, || "volatile master restored a snapshot".into())?;
    check(matches!(VolatileStore::new().restore(), Ok(None)), || "fresh volatile store is not empty".into())?;
    check(matches!(lookup, Err(ClientError::NotFound(_))), || format!("volatile app lookup: {lookup:?}"))?;
    Ok("durable: 20/20 terminal with one record each; volatile: restore empty".into())
}

// ---------------------------------------------------------------- 8

async fn throughput() -> Outcome {
    let cloud = Cloud::start(CloudOptions { workers: 2, slots: 4, storage: false, ..Default::default() }).await;
    let mut app = cloud.client.create_application(Model::Task, "sleepers", vec![]).await.map_err(|e| e.to_string())?;
    let tasks: Vec<TaskUnit> = (0..64).map(|_| TaskUnit::sleep(250)).collect();
    let started = Instant::now();
    let statuses = run_tasks(&mut app, tasks, Duration::from_secs(60)).await.map_err(|e| e.to_string())?;
    let makespan = started.elapsed();
    cloud.stop().await;
    let done = statuses.iter().filter(|s| s.state == JobState::Completed).count();
    check(done == 64, || format!("{done}/64 completed"))?;
    check(makespan <= Duration::from_secs(6), || format!("makespan {makespan:?}"))?;
    Ok(format!("makespan {makespan:.2?}, speedup {:.1}x over 16 s serial", 16.0 / makespan.as_secs_f64()))
}

// ---------------------------------------------------------------- 9

async fn licensing() -> Outcome {
    let opts = CloudOptions { workers: 2, license_max_nodes: 3, storage: false, ..Default::default() };
    let mut cloud = Cloud::start(opts).await;
    let extra = cloud.add_worker().await;
    let direct = cloud
        .master
        .call(cloud.master.node_id(), "directory", KIND_REGISTER, encode(&extra.membership_record()))
        .await;
    let mut peak = 0;
    let until = Instant::now() + Duration::from_secs(2);
    let mut extra_listed = false;
    while Instant::now() < until {
        let records = cloud.records().await;
        let live = records.iter().filter(|r| r.state != LivenessState::Dead).count();
        peak = peak.max(live);
        extra_listed |= records.iter().any(|r| r.node_id == extra.node_id());
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
    cloud.stop().await;
    check(direct.as_ref().err().and_then(|e| e.code()) == Some("LicenseRejected"), || format!("4th register: {direct:?}"))?;
    check(!extra_listed, || "4th node appeared in the catalogue".into())?;
    check(peak <= 3, || format!("alive+suspect reached {peak}"))?;
    Ok(format!("4th register rejected, alive+suspect peaked at {peak}"))
}

// ---------------------------------------------------------------- 10

async fn accounting() -> Outcome {
    let cloud = Cloud::start(CloudOptions { workers: 2, slots: 3, storage: false, ..Default::default() }).await;
    let mut app = cloud.client.create_application(Model::Task, "metered", vec![]).await.map_err(|e| e.to_string())?;
    // Lengths sit just under whole seconds because charges round up.
    let durations = [850u64, 1850, 2850, 850, 1850, 850];
    let ids: Vec<JobId> = durations
        .iter()
        .map(|ms| app.add_unit(TaskUnit::sleep(*ms).into_spec()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    app.submit().await.map_err(|e| e.to_string())?;
    let mut running_at: HashMap<JobId, u64> = HashMap::new();
    let mut ended_at: HashMap<JobId, u64> = HashMap::new();
    let deadline = Instant::now() + Duration::from_secs(30);
    while ended_at.len() < ids.len() {
        for ev in app.poll_events().await.map_err(|e| e.to_string())? {
            match ev.state {
                JobState::Running => {
                    running_at.insert(ev.job_id, ev.at);
                }
                s if s.is_terminal() => {
                    ended_at.insert(ev.job_id, ev.at);
                }
                _ => {}
            }
        }
        check(Instant::now() < deadline, || "jobs did not finish".into())?;
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let usage = cloud.client.usage().await.map_err(|e| e.to_string())?;
    cloud.stop().await;

    let node_of: HashMap<JobId, NodeId> = usage.records.iter().map(|r| (r.job_id, r.node_id)).collect();
    let mut wall_ms: BTreeMap<NodeId, u64> = BTreeMap::new();
    let mut jobs_on: BTreeMap<NodeId, u64> = BTreeMap::new();
    for id in &ids {
        let node = *node_of.get(id).ok_or("job missing from usage")?;
        *wall_ms.entry(node).or_default() += ended_at[id] - running_at[id];
        *jobs_on.entry(node).or_default() += 1;
    }
    let mut worst = 0i64;
    for (node, wall) in &wall_ms {
        let charged_ms = usage.charged_by_node.get(node).copied().unwrap_or(0) as i64 * 1000;
        let diff = (charged_ms - *wall as i64).abs();
        let allowed = 200 * jobs_on[node] as i64;
        check(diff <= allowed, || format!("node {node}: charged {charged_ms} ms, wall {wall} ms"))?;
        worst = worst.max(diff / jobs_on[node] as i64);
    }
    let hourly = Tariff { granularity_s: 3600, rate: 1.0 };
    let ninety = UsageRecord {
        user_id: "u".into(),
        app_id: AppId::new(),
        job_id: JobId::new(),
        node_id: NodeId::new(),
        attempt: 1,
        started_at: 0,
        ended_at: 90_000,
        charged_seconds: cirrus_core::transversal::accounting::charged_seconds(0, 90_000),
    };
    let p = price(&[ninety], &hourly);
    check(p == 1.0, || format!("90 s job priced {p}"))?;
    check(usage.price == usage.records.len() as f64, || format!("run priced {}", usage.price))?;
    Ok(format!("charges within {worst} ms per job of wall usage, 90 s job = {p} unit"))
}

// ---------------------------------------------------------------- 11

/// Relays one connection, flipping one bit at `offset` within the data
/// frames (everything after the first frame) flowing in the corrupted
/// direction.
fn corrupting_proxy(upstream: String, upload: bool, offset: usize, bit: u8) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    std::thread::spawn(move || {
        let (client, _) = listener.accept().unwrap();
        let server = TcpStream::connect(upstream).unwrap();
        let (c2, s2) = (client.try_clone().unwrap(), server.try_clone().unwrap());
        let (from, to, plain_from, plain_to) =
            if upload { (client, server, s2, c2) } else { (server, client, c2, s2) };
        let plain = std::thread::spawn(move || relay_plain(plain_from, plain_to));
        relay_flipping(from, to, offset, bit);
        let _ = plain.join();
    });
    addr
}

fn relay_plain(mut from: TcpStream, mut to: TcpStream) {
    let _ = std::io::copy(&mut from, &mut to);
    let _ = to.shutdown(Shutdown::Write);
}

fn relay_flipping(mut from: TcpStream, mut to: TcpStream, offset: usize, bit: u8) {
    let mut seen = 0usize;
    let mut frame = 0usize;
    loop {
        let mut len = [0u8; 4];
        if from.read_exact(&mut len).is_err() {
            break;
        }
        let mut body = vec![0u8; u32::from_be_bytes(len) as usize];
        if from.read_exact(&mut body).is_err() {
            break;
        }
        if frame > 0 {
            if offset >= seen && offset < seen + body.len() {
                body[offset - seen] ^= 1 << bit;
            }
            seen += body.len();
        }
        frame += 1;
        if to.write_all(&len).and_then(|_| to.write_all(&body)).is_err() {
            break;
        }
    }
    let _ = to.shutdown(Shutdown::Write);
}

fn blob(len: usize, seed: u64) -> Vec<u8> {
    let mut v = vec![0u8; len];
    StdRng::seed_from_u64(seed).fill(&mut v[..]);
    v
}

async fn storage_integrity() -> Outcome {
    tokio::task::spawn_blocking(|| -> Outcome {
        let dir = tempfile::tempdir().unwrap();
        let server = AftpServer::start(&ServerOptions {
            listen: "127.0.0.1:0".into(),
            root_dir: dir.path().to_path_buf(),
            token: String::new(),
        })
        .map_err(|e| e.to_string())?;
        let client = AftpClient::new(server.spec());

        let mut runner = TestRunner::new(PropConfig { cases: 24, failure_persistence: None, ..PropConfig::default() });
        let strategy = (prop_oneof![Just(0usize), Just(8 << 20), 0usize..=(8 << 20)], any::<u64>());
        runner
            .run(&strategy, |(len, seed)| {
                let data = blob(len, seed);
                let name = format!("blob-{seed}");
                let fd = client.put(&name, &data).map_err(|e| TestCaseError::fail(e.to_string()))?;
                prop_assert_eq!(fd.size_bytes, len as u64);
                let back = client.get(&name).map_err(|e| TestCaseError::fail(e.to_string()))?;
                prop_assert!(back == data, "get returned different bytes for {} bytes", len);
                Ok(())
            })
            .map_err(|e| format!("round trip: {e}"))?;

        let mut rng = StdRng::seed_from_u64(11);
        let mut detected = 0;
        for trial in 0..200 {
            let upload = trial % 2 == 0;
            let len = rng.gen_range(1..=256 * 1024);
            let data = blob(len, trial);
            let name = format!("victim-{trial}");
            if !upload {
                client.put(&name, &data).map_err(|e| e.to_string())?;
            }
            let offset = rng.gen_range(0..len + cirrus_core::storage::DIGEST_LEN);
            let proxy = corrupting_proxy(server.endpoint().to_string(), upload, offset, rng.gen_range(0..8));
            let mut spec = server.spec();
            spec.endpoint = proxy;
            let relayed = AftpClient::new(spec);
            let result = if upload { relayed.put(&name, &data).map(|_| ()) } else { relayed.get(&name).map(|_| ()) };
            match result {
                Err(StorageError::DigestMismatch(_)) => detected += 1,
                other => return Err(format!("trial {trial} ({}): {other:?}", if upload { "put" } else { "get" })),
            }
            if upload {
                check(client.get(&name).is_err(), || format!("corrupted upload {trial} was stored"))?;
            }
        }
        Ok(format!("24 round trips up to 8 MiB exact, {detected}/200 single-bit corruptions detected"))
    })
    .await
    .map_err(|e| e.to_string())?
}

// ----------------------------------------------------------------

async fn run<F>(n: u32, name: &str, fut: F) -> bool
where
    F: Future<Output = Outcome> + Send + 'static,
{
    let started = Instant::now();
    let result = match tokio::spawn(fut).await {
        Ok(r) => r,
        Err(e) => Err(format!("panicked: {e}")),
    };
    let took = started.elapsed();
    match result {
        Ok(detail) => {
            println!("criterion {n} {name}: PASS ({detail}) [{took:.2?}]");
            true
        }
        Err(detail) => {
            println!("criterion {n} {name}: FAIL ({detail}) [{took:.2?}]");
            false
        }
    }
}

fn main() -> ExitCode {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let results = rt.block_on(async {
        vec![
            run(1, "mapreduce word count", mapreduce_wordcount()).await,
            run(2, "sweep cartesian product", sweep_cartesian()).await,
            run(3, "reservation oracle", reservation_oracle()).await,
            run(4, "negotiation round trip", negotiation()).await,
            run(5, "membership", membership()).await,
            run(6, "reserved-node exclusivity", exclusivity()).await,
            run(7, "crash recovery", crash_recovery()).await,
            run(8, "throughput", throughput()).await,
            run(9, "licensing", licensing()).await,
            run(10, "accounting and pricing", accounting()).await,
            run(11, "storage integrity", storage_integrity()).await,
        ]
    });
    let passed = results.iter().filter(|r| **r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
