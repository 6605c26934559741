//! Advance reservation: the global allocation map, bounded alternate-offers
//! negotiation and per-node admission control.

mod admission;
mod book;
mod service;

pub use admission::{Admission, AllocationManager, NodeAllocation, RefuseReason};
pub use book::{
    earliest_feasible, AllocationEntry, AllocationMap, CounterOffer, NegotiationOutcome, Reservation,
    ReservationBook, ReservationError, ReservationRequest, ReservationState, ReservationTransition, TimeWindow,
    DEFAULT_HORIZON_S, DEFAULT_MAX_ROUNDS,
};
pub use service::{
    AcceptMessage, AllocationSync, BindMessage, CancelMessage, RequestMessage, ReservationService, KIND_ACCEPT,
    KIND_ALLOC_SYNC, KIND_BIND, KIND_CANCEL, KIND_LIST, KIND_REQUEST, KIND_TICK,
};
