//! Management surface: cloud statistics, the HTTP API and local cloud
//! setup. The `ctl` binary is a thin layer over this module.

mod http;
mod init;
mod stats;

pub use http::{router, CreateApplicationBody, ErrorBody, HttpService, SubmitBody, KIND_HTTP_ADDR};
pub use init::{cloud_configs, init_cloud, InitLayout, InitOptions};
pub use stats::{CloudStats, NodeStats};

use crate::appmodel::ClientError;

/// Process exit codes used by the command-line tools.
pub mod exit {
    pub const OK: i32 = 0;
    pub const GENERIC: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONNECTION_FAILED: i32 = 3;
    pub const AUTH_FAILED: i32 = 4;
    pub const NOT_FOUND: i32 = 5;
    pub const REJECTED: i32 = 6;
    pub const TIMEOUT: i32 = 7;
}

pub fn exit_code(e: &ClientError) -> i32 {
    match e {
        ClientError::ConnectionFailed { .. } => exit::CONNECTION_FAILED,
        ClientError::AuthFailed => exit::AUTH_FAILED,
        ClientError::NotFound(_) => exit::NOT_FOUND,
        ClientError::Rejected(_) | ClientError::AppStopped => exit::REJECTED,
        ClientError::Timeout => exit::TIMEOUT,
        ClientError::UnknownModel(_) | ClientError::WrongModel { .. } => exit::USAGE,
        ClientError::Remote(_) | ClientError::Protocol(_) => exit::GENERIC,
    }
}
