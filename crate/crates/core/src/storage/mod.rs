//! Storage service building blocks: pluggable data channels, the built-in
//! `aftp` transfer protocol, a `local` reference channel, and job staging.

mod aftp;
mod channel;
mod disk;
mod service;
mod staging;

pub use aftp::{AftpClient, AftpServer, AFTP_CHUNK, DIGEST_LEN};
pub use channel::{
    validate_name, ChannelClient, ChannelRegistry, ChannelServer, ClientFactory, DataChannelSpec,
    Direction, FileDescriptor, ServerFactory, ServerOptions, StorageError, UnreachableCause,
};
pub use disk::{sha256_hex, DiskStore, EMPTY_SHA256};
pub use staging::{stage_in, stage_out, StageFailure, StageOutReport, StagingPlan};
pub use service::{StorageService, KIND_CATALOGUE, KIND_SPEC};
