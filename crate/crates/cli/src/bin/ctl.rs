//! Cloud control: set up, start and stop nodes, monitor, submit, reserve.

use std::path::PathBuf;
use std::process::{ExitCode, Stdio};
use std::time::Duration;

use clap::{Parser, Subcommand};
use cirrus_cli::{fail, init_logging, usage, ConnectArgs};
use cirrus_core::appmodel::{ClientError, CloudClient};
use cirrus_core::container::{encode, AdminRequest, ContainerConfig, InstallRequest, ServiceEntry, CONTAINER_SERVICE};
use cirrus_core::ctl::{exit, init_cloud, CloudStats, InitOptions};
use cirrus_core::execution::{JobSpec, Model};
use cirrus_core::ids::now_secs;
use cirrus_core::models::TaskUnit;
use cirrus_core::reservation::{NegotiationOutcome, ReservationRequest};

#[derive(Parser)]
#[command(name = "ctl", version, about = "Manage a cloud")]
struct Cli {
    #[command(flatten)]
    connect: ConnectArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write master, worker and client config files for a local cloud.
    Init {
        /// Total nodes, master included.
        #[arg(long, default_value_t = 2)]
        nodes: u32,
        #[arg(long, default_value = "cloud")]
        dir: PathBuf,
        #[arg(long, default_value_t = 7000)]
        base_port: u16,
        #[arg(long, default_value_t = 7080)]
        http_port: u16,
        #[arg(long, default_value_t = 7100)]
        storage_port: u16,
        /// Executor slots per worker.
        #[arg(long, default_value_t = 2)]
        slots: u32,
        #[arg(long, default_value_t = 1000)]
        heartbeat_ms: u64,
        /// Maximum live nodes; 0 for unlimited.
        #[arg(long, default_value_t = 0)]
        license: u32,
        /// Keep state in memory only.
        #[arg(long)]
        volatile: bool,
        /// Enable token security with an `admin` user holding this token.
        #[arg(long)]
        admin_token: Option<String>,
    },
    /// Node control.
    #[command(subcommand)]
    Node(NodeCommand),
    /// Print cloud statistics once.
    Stats {
        #[arg(long)]
        json: bool,
    },
    /// Reprint statistics every interval.
    Watch {
        #[arg(long, default_value_t = 2000)]
        interval_ms: u64,
        /// Stop after this many prints; 0 runs until interrupted.
        #[arg(long, default_value_t = 0)]
        count: u64,
    },
    /// Submit one process as a task, or a JSON list of job specs.
    Submit {
        #[arg(long, default_value = "ctl")]
        name: String,
        /// JSON file with an array of job specs.
        #[arg(long)]
        jobs: Option<PathBuf>,
        /// Wait for the jobs to finish.
        #[arg(long)]
        wait: bool,
        #[arg(long, default_value_t = 600)]
        wait_s: u64,
        /// Program and arguments.
        #[arg(trailing_var_arg = true)]
        command: Vec<String>,
    },
    /// Request an advance reservation.
    Reserve {
        #[arg(long, default_value_t = 1)]
        nodes: u32,
        /// Start bound: epoch seconds, or `+N` seconds from now.
        #[arg(long, allow_hyphen_values = true)]
        earliest: String,
        /// End bound, same format.
        #[arg(long, allow_hyphen_values = true)]
        latest: String,
        #[arg(long)]
        duration_s: i64,
        /// Accept counter-offers until the negotiation ends.
        #[arg(long)]
        accept: bool,
    },
}

#[derive(Subcommand)]
enum NodeCommand {
    /// Launch a node process from a config file.
    Start {
        #[arg(long, required = true)]
        config: Vec<PathBuf>,
    },
    /// Install a service into a running node.
    Install {
        /// Node endpoint.
        #[arg(long)]
        endpoint: String,
        #[arg(long)]
        service: String,
        /// Service option, `key=value`; repeatable.
        #[arg(long = "option")]
        options: Vec<String>,
    },
    /// Drain and stop a node, by name or endpoint.
    Stop { node: String },
}

fn parse_time(s: &str) -> Result<i64, String> {
    match s.strip_prefix('+') {
        Some(rel) => rel.parse::<i64>().map(|r| now_secs() + r).map_err(|e| format!("{s}: {e}")),
        None => s.parse::<i64>().map_err(|e| format!("{s}: {e}")),
    }
}

fn parse_option(entry: ServiceEntry, kv: &str) -> Result<ServiceEntry, String> {
    let (k, v) = kv.split_once('=').ok_or_else(|| format!("option {kv:?} is not key=value"))?;
    Ok(if let Ok(i) = v.parse::<i64>() {
        entry.with(k, i)
    } else if let Ok(b) = v.parse::<bool>() {
        entry.with(k, b)
    } else {
        entry.with(k, v)
    })
}

fn node_binary() -> PathBuf {
    let exe = std::env::current_exe().unwrap_or_default();
    exe.with_file_name(format!("cirrus-node{}", std::env::consts::EXE_SUFFIX))
}

async fn resolve_endpoint(client: &CloudClient, node: &str) -> Result<String, ClientError> {
    if node.contains(':') {
        return Ok(node.to_string());
    }
    let records = client.nodes().await?;
    records
        .into_iter()
        .find(|r| r.name == node || r.node_id.to_string() == node)
        .map(|r| r.endpoint)
        .ok_or_else(|| ClientError::NotFound(format!("node {node}")))
}

async fn run(cli: Cli) -> ExitCode {
    let client = match cli.connect.client() {
        Ok(c) => c,
        Err(e) => return usage("ctl", e),
    };
    match cli.command {
        Command::Init { nodes, dir, base_port, http_port, storage_port, slots, heartbeat_ms, license, volatile, admin_token } => {
            if nodes == 0 {
                return usage("ctl", "--nodes must be at least 1");
            }
            let opts = InitOptions {
                nodes,
                base_port,
                http_port,
                storage_port,
                slots_per_worker: slots,
                heartbeat_interval_ms: heartbeat_ms,
                license_max_nodes: license,
                durable: !volatile,
                admin_token,
                ..InitOptions::default()
            };
            match init_cloud(&dir, &opts) {
                Ok(layout) => {
                    println!("master  {}", layout.master.display());
                    for w in &layout.workers {
                        println!("worker  {}", w.display());
                    }
                    println!("client  {}", layout.client.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("ctl: {e}");
                    ExitCode::from(exit::GENERIC as u8)
                }
            }
        }
        Command::Node(NodeCommand::Start { config }) => {
            let binary = node_binary();
            for path in config {
                let cfg = match ContainerConfig::load(&path) {
                    Ok(c) => c,
                    Err(e) => return usage("ctl", e),
                };
                let log = path.with_extension("log");
                let out = match std::fs::File::create(&log) {
                    Ok(f) => f,
                    Err(e) => return usage("ctl", format!("{}: {e}", log.display())),
                };
                let err = out.try_clone().expect("log handle");
                match std::process::Command::new(&binary)
                    .arg("--config")
                    .arg(&path)
                    .stdin(Stdio::null())
                    .stdout(out)
                    .stderr(err)
                    .spawn()
                {
                    Ok(child) => println!("{} pid {} on {}", cfg.display_name(), child.id(), cfg.listen_endpoint),
                    Err(e) => {
                        eprintln!("ctl: cannot start {}: {e}", binary.display());
                        return ExitCode::from(exit::GENERIC as u8);
                    }
                }
            }
            ExitCode::SUCCESS
        }
        Command::Node(NodeCommand::Install { endpoint, service, options }) => {
            let mut entry = ServiceEntry::new(&service);
            for kv in &options {
                entry = match parse_option(entry, kv) {
                    Ok(e) => e,
                    Err(e) => return usage("ctl", e),
                };
            }
            let node = CloudClient::new(endpoint, client.credentials().clone());
            let req = InstallRequest { credentials: client.credentials().clone(), service: entry };
            match node.call_raw(CONTAINER_SERVICE, "container.install", encode(&req)).await {
                Ok(_) => {
                    println!("installed {service}");
                    ExitCode::SUCCESS
                }
                Err(e) => fail("ctl", &e),
            }
        }
        Command::Node(NodeCommand::Stop { node }) => {
            let endpoint = match resolve_endpoint(&client, &node).await {
                Ok(e) => e,
                Err(e) => return fail("ctl", &e),
            };
            let target = CloudClient::new(endpoint.clone(), client.credentials().clone());
            let req = AdminRequest { credentials: client.credentials().clone(), name: String::new() };
            match target.call_raw(CONTAINER_SERVICE, "container.shutdown", encode(&req)).await {
                Ok(_) => {
                    println!("stopping {node} at {endpoint}");
                    ExitCode::SUCCESS
                }
                Err(e) => fail("ctl", &e),
            }
        }
        Command::Stats { json } => match CloudStats::collect(&client).await {
            Ok(stats) => {
                if json {
                    println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
                } else {
                    print!("{}", stats.render());
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail("ctl", &e),
        },
        Command::Watch { interval_ms, count } => {
            let mut printed = 0;
            loop {
                match CloudStats::collect(&client).await {
                    Ok(stats) => {
                        println!("--- {}", stats.sampled_at);
                        print!("{}", stats.render());
                    }
                    Err(e) => return fail("ctl", &e),
                }
                printed += 1;
                if count != 0 && printed >= count {
                    return ExitCode::SUCCESS;
                }
                tokio::time::sleep(Duration::from_millis(interval_ms)).await;
            }
        }
        Command::Submit { name, jobs, wait, wait_s, command } => {
            let specs: Vec<JobSpec> = match (&jobs, command.split_first()) {
                (Some(path), _) => {
                    let text = match std::fs::read_to_string(path) {
                        Ok(t) => t,
                        Err(e) => return usage("ctl", format!("{}: {e}", path.display())),
                    };
                    match serde_json::from_str(&text) {
                        Ok(s) => s,
                        Err(e) => return usage("ctl", format!("{}: {e}", path.display())),
                    }
                }
                (None, Some((program, args))) => {
                    let args: Vec<&str> = args.iter().map(String::as_str).collect();
                    vec![TaskUnit::run_process(program, &args).into_spec()]
                }
                (None, None) => return usage("ctl", "give a command or --jobs"),
            };
            let mut app = match client.create_application(Model::Task, &name, vec![]).await {
                Ok(a) => a,
                Err(e) => return fail("ctl", &e),
            };
            for s in specs {
                if let Err(e) = app.add_unit(s) {
                    return fail("ctl", &e);
                }
            }
            let ids = match app.submit().await {
                Ok(ids) => ids,
                Err(e) => return fail("ctl", &e),
            };
            println!("application {}", app.id());
            for id in &ids {
                println!("job {id}");
            }
            if !wait {
                return ExitCode::SUCCESS;
            }
            match app.wait(Duration::from_secs(wait_s)).await {
                Ok(units) => {
                    let mut code = ExitCode::SUCCESS;
                    for u in units.values() {
                        println!("{} {}", u.unit_id, u.state.as_str());
                        if let Some(r) = &u.result {
                            print!("{}", String::from_utf8_lossy(r));
                        }
                        if let Some(c) = &u.failure_cause {
                            println!("  cause: {c}");
                        }
                        if u.state != cirrus_core::JobState::Completed {
                            code = ExitCode::from(exit::GENERIC as u8);
                        }
                    }
                    code
                }
                Err(e) => fail("ctl", &e),
            }
        }
        Command::Reserve { nodes, earliest, latest, duration_s, accept } => {
            let (earliest, latest) = match (parse_time(&earliest), parse_time(&latest)) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(e), _) | (_, Err(e)) => return usage("ctl", e),
            };
            let request = ReservationRequest::new(&client.credentials().user_id, nodes, earliest, latest, duration_s);
            let outcome = if accept { client.negotiate(request).await } else { client.request_reservation(request).await };
            match outcome {
                Ok(outcome) => {
                    println!("{}", serde_json::to_string_pretty(&outcome).expect("outcome serializes"));
                    match outcome {
                        NegotiationOutcome::Confirmed { .. } => ExitCode::SUCCESS,
                        _ => ExitCode::from(exit::REJECTED as u8),
                    }
                }
                Err(e) => fail("ctl", &e),
            }
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    init_logging();
    run(Cli::parse()).await
}
