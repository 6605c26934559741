//! Container daemon: hosts the services named in its config file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use cirrus_core::container::{Container, ContainerConfig};

#[derive(Parser)]
#[command(name = "cirrus-node", version, about = "Run one cloud node")]
struct Args {
    /// Container configuration (TOML).
    #[arg(long)]
    config: PathBuf,
}

#[tokio::main]
async fn main() -> ExitCode {
    cirrus_cli::init_logging();
    let args = Args::parse();
    let config = match ContainerConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("cirrus-node: {e}");
            return ExitCode::from(2);
        }
    };
    let container = match Container::start(config).await {
        Ok(c) => c,
        Err(e) => {
            eprintln!("cirrus-node: {e}");
            return ExitCode::from(1);
        }
    };
    println!("{} listening on {}", container.node_id(), container.endpoint());
    tokio::select! {
        _ = tokio::signal::ctrl_c() => container.shutdown().await,
        _ = container.wait_stopped() => {}
    }
    ExitCode::SUCCESS
}
