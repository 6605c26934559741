//! Client side of the application model: applications as the unit of
//! deployment, work units mirrored from jobs, and event delivery.

mod application;
mod client;

pub use application::{Application, EventSubscription, UnitStatus};
pub use client::{ClientConfig, ClientError, CloudClient};
