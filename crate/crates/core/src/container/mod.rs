//! Hosting runtime: service lifecycle, message routing and membership.

mod config;
mod library;
mod provider;
mod runtime;
mod service;

pub use config::{ConfigError, ContainerConfig, ServiceEntry};
pub use library::{ServiceFactory, ServiceLibrary};
pub use provider::InProcessProvider;
pub use runtime::{
    call_json, discover, send_remote, AdminRequest, Container, ContainerBuilder, ContainerInfo, Environment,
    InstallRequest, ServiceContext, CONTAINER_SERVICE, SNAPSHOT_PERIOD,
};
pub use service::{
    decode, encode, unknown_kind, CallError, DispatchError, InstallError, Reply, Service, ServiceRegistration,
    ServiceResult, ServiceState, StartError,
};
