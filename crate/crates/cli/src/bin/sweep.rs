//! Parameter sweeps: build a template, preview its expansion, run it.

use std::io::{BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use cirrus_cli::{fail, init_logging, usage, ConnectArgs};
use cirrus_core::ctl::exit;
use cirrus_core::execution::{JobState, Model};
use cirrus_core::storage::DataChannelSpec;
use cirrus_core::sweep::{run_sweep, TaskTemplate, Wizard};

#[derive(Parser)]
#[command(name = "sweep", version, about = "Parameter sweep tools")]
struct Cli {
    #[command(flatten)]
    connect: ConnectArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a template interactively.
    Wizard {
        /// Where to write the template.
        #[arg(long, default_value = "sweep.toml")]
        out: PathBuf,
    },
    /// Print every combination of a template.
    Expand {
        file: PathBuf,
        /// Only print; never contacts a cloud.
        #[arg(long)]
        dry_run: bool,
    },
    /// Run every combination as a task and wait for all of them.
    Run {
        file: PathBuf,
        /// Channel for inputs and outputs, e.g. `aftp://host:port/data`.
        #[arg(long)]
        channel: Option<String>,
        #[arg(long, default_value_t = 3600)]
        timeout_s: u64,
    },
}

fn load(file: &PathBuf) -> Result<TaskTemplate, ExitCode> {
    TaskTemplate::load(file).map_err(|e| usage("sweep", e))
}

async fn run(cli: Cli) -> ExitCode {
    match cli.command {
        Command::Wizard { out } => {
            let stdin = std::io::stdin();
            let template = match Wizard::new(BufReader::new(stdin.lock()), std::io::stdout()).run() {
                Ok(t) => t,
                Err(e) => return usage("sweep", e),
            };
            if let Err(e) = std::fs::write(&out, template.to_toml()) {
                eprintln!("sweep: {}: {e}", out.display());
                return ExitCode::from(exit::GENERIC as u8);
            }
            println!("wrote {}", out.display());
            ExitCode::SUCCESS
        }
        Command::Expand { file, dry_run: _ } => {
            let template = match load(&file) {
                Ok(t) => t,
                Err(code) => return code,
            };
            let combos = match template.expand() {
                Ok(c) => c,
                Err(e) => return usage("sweep", e),
            };
            let mut out = std::io::stdout().lock();
            for c in &combos {
                let params: Vec<String> = c.parameters.iter().map(|(k, v)| format!("{k}={v}")).collect();
                let _ = writeln!(out, "{:>5}  {}", c.index, params.join(" "));
                for cmd in &c.commands {
                    let _ = writeln!(out, "       {} {}", cmd.operation, String::from_utf8_lossy(&cmd.params));
                }
            }
            let _ = writeln!(out, "{} combinations", combos.len());
            ExitCode::SUCCESS
        }
        Command::Run { file, channel, timeout_s } => {
            let template = match load(&file) {
                Ok(t) => t,
                Err(code) => return code,
            };
            let config = match cli.connect.config() {
                Ok(c) => c,
                Err(e) => return usage("sweep", e),
            };
            let channel: Option<DataChannelSpec> = match channel.or_else(|| config.channels.first().cloned()) {
                Some(c) => match c.parse() {
                    Ok(spec) => Some(spec),
                    Err(e) => return usage("sweep", format!("{c}: {e}")),
                },
                None => None,
            };
            let client = cirrus_core::CloudClient::from_config(&config);
            let name = if template.name.is_empty() { "sweep".to_string() } else { template.name.clone() };
            let mut app = match client.create_application(Model::Task, &name, channel.iter().cloned().collect()).await {
                Ok(a) => a,
                Err(e) => return fail("sweep", &e),
            };
            println!("application {}", app.id());
            let report = run_sweep(&mut app, &template, channel.as_ref(), Duration::from_secs(timeout_s), |p| {
                let counts: Vec<String> = p.counts.iter().map(|(s, n)| format!("{}={n}", s.as_str())).collect();
                println!("{}/{} done  {}", p.terminal(), p.total, counts.join(" "));
            })
            .await;
            match report {
                Ok(report) => {
                    for e in report.entries.iter().filter(|e| e.state != JobState::Completed) {
                        let params: Vec<String> = e.parameters.iter().map(|(k, v)| format!("{k}={v}")).collect();
                        println!(
                            "{} {} {}: {}",
                            e.index,
                            params.join(" "),
                            e.state.as_str(),
                            e.failure_cause.as_deref().unwrap_or("")
                        );
                    }
                    let failed = report.entries.iter().any(|e| e.state != JobState::Completed);
                    if failed { ExitCode::from(exit::GENERIC as u8) } else { ExitCode::SUCCESS }
                }
                Err(cirrus_core::sweep::SweepRunError::Client(e)) => fail("sweep", &e),
                Err(e) => usage("sweep", e),
            }
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    init_logging();
    run(Cli::parse()).await
}
