//! Membership catalogue, heartbeat failure detection and seed discovery.

mod catalogue;
mod service;

pub use catalogue::{
    Catalogue, DirectoryError, Heartbeat, LivenessState, MembershipRecord, Timeouts, Transition,
};
pub use service::{
    query_catalogue, CatalogueLocation, DirectoryService, DiscoveryError, LeaveRequest, QueryRequest, KIND_HEARTBEAT, KIND_LEAVE,
    KIND_QUERY, KIND_REGISTER, KIND_SWEEP,
};
