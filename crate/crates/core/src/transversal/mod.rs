//! Cross-cutting services: persistence, security, accounting and pricing.

pub mod accounting;
pub mod persistence;
pub mod security;

pub use accounting::{price, Accountant, Tariff, UsageRecord};
pub use persistence::{
    CloudSnapshot, DurableStore, PersistenceProvider, SnapshotHub, StoreError, VolatileStore,
};
pub use security::{
    Action, AnonymousProvider, Credentials, Decision, Denied, Principal, Role, Security,
    SecurityProvider, TokenProvider,
};
