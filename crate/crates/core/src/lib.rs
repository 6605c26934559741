//! A small service-oriented compute cloud.
//!
//! Every node runs a [`container::Container`] that hosts named services and
//! routes envelopes between them. A master usually hosts the directory,
//! reservation and scheduler services; workers host executors. Clients
//! build [`appmodel::Application`]s and run one of the programming models
//! in [`models`] or a parameter sweep from [`sweep`].

pub mod appmodel;
pub mod container;
pub mod ctl;
pub mod directory;
pub mod execution;
pub mod fabric;
pub mod ids;
pub mod models;
pub mod reservation;
pub mod storage;
pub mod sweep;
pub mod transversal;
pub mod wire;

pub use appmodel::{Application, ClientConfig, ClientError, CloudClient, UnitStatus};
pub use container::{Container, ContainerConfig, ServiceEntry};
pub use execution::{JobSpec, JobState, Model, Payload};
pub use ids::{AppId, JobId, NodeId, ReservationId};
