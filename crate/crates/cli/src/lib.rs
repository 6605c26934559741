//! Shared helpers for the command-line tools.

use std::path::Path;
use std::process::ExitCode;

use cirrus_core::appmodel::{ClientConfig, ClientError, CloudClient};
use cirrus_core::ctl::{exit, exit_code};
use cirrus_core::transversal::Credentials;

pub fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

/// Connection flags shared by every client command.
#[derive(clap::Args, Debug, Clone)]
pub struct ConnectArgs {
    /// Client config file with master endpoint and credentials.
    #[arg(long, global = true)]
    pub client: Option<std::path::PathBuf>,
    /// Master endpoint; overrides the client config.
    #[arg(long, global = true)]
    pub master: Option<String>,
    /// `user:token`; overrides the client config.
    #[arg(long, global = true)]
    pub auth: Option<String>,
    /// Request timeout in milliseconds.
    #[arg(long, global = true)]
    pub timeout_ms: Option<u64>,
}

impl ConnectArgs {
    pub fn config(&self) -> Result<ClientConfig, String> {
        let mut config = match &self.client {
            Some(path) => load_client_config(path)?,
            None => ClientConfig {
                master: "127.0.0.1:7000".into(),
                user: "anonymous".into(),
                token: String::new(),
                channels: vec![],
                timeout_ms: 10_000,
            },
        };
        if let Some(m) = &self.master {
            config.master = m.clone();
        }
        if let Some(a) = &self.auth {
            let c = Credentials::from_bearer(a).ok_or("--auth expects user:token")?;
            config.user = c.user_id;
            config.token = c.token;
        }
        if let Some(t) = self.timeout_ms {
            config.timeout_ms = t;
        }
        Ok(config)
    }

    pub fn client(&self) -> Result<CloudClient, String> {
        Ok(CloudClient::from_config(&self.config()?))
    }
}

pub fn load_client_config(path: &Path) -> Result<ClientConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    ClientConfig::parse(&text)
}

/// Print the error and turn it into the documented exit code.
pub fn fail(tool: &str, e: &ClientError) -> ExitCode {
    eprintln!("{tool}: {e}");
    ExitCode::from(exit_code(e) as u8)
}

pub fn usage(tool: &str, message: impl std::fmt::Display) -> ExitCode {
    eprintln!("{tool}: {message}");
    ExitCode::from(exit::USAGE as u8)
}
