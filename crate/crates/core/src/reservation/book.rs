use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{AppId, NodeId, ReservationId};
use crate::wire::WireError;

pub const DEFAULT_MAX_ROUNDS: u32 = 3;
pub const DEFAULT_HORIZON_S: i64 = 86_400;

/// Half-open interval `[start, end)` in whole seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: i64,
    pub end: i64,
}

impl TimeWindow {
    pub fn new(start: i64, end: i64) -> Result<Self, ReservationError> {
        if start >= end {
            return Err(ReservationError::InvalidRequest(format!("window [{start}, {end}) is empty")));
        }
        Ok(Self { start, end })
    }

    pub fn duration_s(&self) -> i64 {
        self.end - self.start
    }

    pub fn contains(&self, t: i64) -> bool {
        self.start <= t && t < self.end
    }

    pub fn overlaps(&self, other: &TimeWindow) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReservationRequest {
    #[serde(default)]
    pub requester: String,
    pub node_count: u32,
    pub earliest: i64,
    pub latest: i64,
    pub duration_s: i64,
    #[serde(default = "default_required")]
    pub required_services: Vec<String>,
    #[serde(default)]
    pub round: u32,
}

fn default_required() -> Vec<String> {
    vec!["executor".into()]
}

impl ReservationRequest {
    pub fn new(requester: &str, node_count: u32, earliest: i64, latest: i64, duration_s: i64) -> Self {
        Self {
            requester: requester.into(),
            node_count,
            earliest,
            latest,
            duration_s,
            required_services: default_required(),
            round: 0,
        }
    }

    pub fn validate(&self, max_rounds: u32) -> Result<(), ReservationError> {
        let bad = |m: &str| Err(ReservationError::InvalidRequest(m.into()));
        if self.node_count == 0 {
            return bad("node_count must be at least 1");
        }
        if self.duration_s < 1 {
            return bad("duration_s must be at least 1");
        }
        if self.earliest.checked_add(self.duration_s).map_or(true, |e| e > self.latest) {
            return bad("earliest + duration_s exceeds latest");
        }
        if !self.required_services.iter().any(|s| s == "executor") {
            return bad("required_services must include executor");
        }
        if self.round > max_rounds {
            return bad("round exceeds max_rounds");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReservationState {
    Confirmed,
    Active,
    Expired,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reservation {
    pub reservation_id: ReservationId,
    pub node_ids: Vec<NodeId>,
    pub window: TimeWindow,
    pub owner: String,
    pub bound_app: Option<AppId>,
    pub state: ReservationState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterOffer {
    pub original_request: ReservationRequest,
    pub proposed_window: TimeWindow,
    pub proposed_node_count: u32,
    /// Round of the request this offer answers.
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "lowercase")]
pub enum NegotiationOutcome {
    Confirmed { reservation: Reservation },
    Counter { offer: CounterOffer },
    Rejected { reason: String },
}

impl NegotiationOutcome {
    pub fn class(&self) -> &'static str {
        match self {
            NegotiationOutcome::Confirmed { .. } => "confirmed",
            NegotiationOutcome::Counter { .. } => "counter",
            NegotiationOutcome::Rejected { .. } => "rejected",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReservationError {
    #[error("invalid reservation request: {0}")]
    InvalidRequest(String),
    #[error("reservation {0} not found")]
    NotFound(ReservationId),
    #[error("reservation {id} is {state:?} and cannot be cancelled")]
    NotCancellable { id: ReservationId, state: ReservationState },
    #[error("reservation {0} belongs to another user")]
    NotOwner(ReservationId),
    #[error("unauthenticated")]
    Unauthenticated,
}

impl From<ReservationError> for WireError {
    fn from(e: ReservationError) -> Self {
        let code = match e {
            ReservationError::InvalidRequest(_) => "InvalidRequest",
            ReservationError::NotFound(_) => "NotFound",
            ReservationError::NotCancellable { .. } => "NotCancellable",
            ReservationError::NotOwner(_) => "Unauthorized",
            ReservationError::Unauthenticated => "Unauthenticated",
        };
        WireError::new(code, e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationEntry {
    pub window: TimeWindow,
    pub reservation_id: ReservationId,
}

/// Per-node reserved windows, sorted by start and non-overlapping.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationMap {
    nodes: BTreeMap<NodeId, Vec<AllocationEntry>>,
}

impl AllocationMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&NodeId, &Vec<AllocationEntry>)> {
        self.nodes.iter()
    }

    pub fn entries(&self, node: NodeId) -> &[AllocationEntry] {
        self.nodes.get(&node).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_free(&self, node: NodeId, window: &TimeWindow) -> bool {
        !self.entries(node).iter().any(|e| e.window.overlaps(window))
    }

    /// Callers check [`is_free`](Self::is_free) first.
    pub fn insert(&mut self, node: NodeId, entry: AllocationEntry) {
        let list = self.nodes.entry(node).or_default();
        let pos = list.partition_point(|e| e.window.start < entry.window.start);
        list.insert(pos, entry);
    }

    pub fn remove_reservation(&mut self, id: ReservationId) {
        for list in self.nodes.values_mut() {
            list.retain(|e| e.reservation_id != id);
        }
        self.nodes.retain(|_, l| !l.is_empty());
    }

    /// Full scan for ordering and overlap.
    pub fn check_non_overlapping(&self) -> Result<(), String> {
        for (node, list) in &self.nodes {
            for pair in list.windows(2) {
                if pair[0].window.start > pair[1].window.start {
                    return Err(format!("windows on {node} out of order"));
                }
                if pair[0].window.overlaps(&pair[1].window) {
                    return Err(format!(
                        "windows {:?} and {:?} overlap on {node}",
                        pair[0].window, pair[1].window
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Earliest `s` in `[lo, hi - duration]` where at least `count` of
/// `candidates` are free on `[s, s + duration)`, with the chosen nodes
/// (lowest ids first).
///
/// Only `lo` and window ends need checking: if `s > lo` is the earliest
/// feasible start, some node became free exactly at `s`.
pub fn earliest_feasible(
    map: &AllocationMap,
    candidates: &[NodeId],
    count: u32,
    duration: i64,
    lo: i64,
    hi: i64,
) -> Option<(TimeWindow, Vec<NodeId>)> {
    if count == 0 || candidates.len() < count as usize || lo + duration > hi {
        return None;
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut starts: Vec<i64> = vec![lo];
    for node in &sorted {
        starts.extend(map.entries(*node).iter().map(|e| e.window.end).filter(|&e| e > lo));
    }
    starts.sort_unstable();
    starts.dedup();
    for s in starts {
        if s + duration > hi {
            break;
        }
        let window = TimeWindow { start: s, end: s + duration };
        let free: Vec<NodeId> =
            sorted.iter().copied().filter(|n| map.is_free(*n, &window)).take(count as usize).collect();
        if free.len() == count as usize {
            return Some((window, free));
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReservationTransition {
    pub reservation_id: ReservationId,
    pub from: ReservationState,
    pub to: ReservationState,
}

/// The global reservation state: every reservation plus the allocation map.
#[derive(Debug, Clone, PartialEq)]
pub struct ReservationBook {
    reservations: BTreeMap<ReservationId, Reservation>,
    map: AllocationMap,
    pub max_rounds: u32,
    pub horizon_s: i64,
}

impl Default for ReservationBook {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_ROUNDS, DEFAULT_HORIZON_S)
    }
}

impl ReservationBook {
    pub fn new(max_rounds: u32, horizon_s: i64) -> Self {
        Self { reservations: BTreeMap::new(), map: AllocationMap::new(), max_rounds, horizon_s }
    }

    pub fn restore(&mut self, reservations: Vec<Reservation>, map: AllocationMap) {
        self.reservations = reservations.into_iter().map(|r| (r.reservation_id, r)).collect();
        self.map = map;
    }

    pub fn map(&self) -> &AllocationMap {
        &self.map
    }

    pub fn get(&self, id: ReservationId) -> Option<&Reservation> {
        self.reservations.get(&id)
    }

    pub fn reservations(&self) -> impl Iterator<Item = &Reservation> {
        self.reservations.values()
    }

    /// Book within `[earliest, latest]`, else counter within the horizon,
    /// else reject. `candidates` are the eligible nodes.
    pub fn request(
        &mut self,
        req: &ReservationRequest,
        candidates: &[NodeId],
    ) -> Result<NegotiationOutcome, ReservationError> {
        req.validate(self.max_rounds)?;
        if let Some((window, nodes)) =
            earliest_feasible(&self.map, candidates, req.node_count, req.duration_s, req.earliest, req.latest)
        {
            let reservation = Reservation {
                reservation_id: ReservationId::new(),
                node_ids: nodes.clone(),
                window,
                owner: req.requester.clone(),
                bound_app: None,
                state: ReservationState::Confirmed,
            };
            for node in nodes {
                self.map.insert(node, AllocationEntry { window, reservation_id: reservation.reservation_id });
            }
            self.reservations.insert(reservation.reservation_id, reservation.clone());
            return Ok(NegotiationOutcome::Confirmed { reservation });
        }
        if req.round >= self.max_rounds {
            return Ok(NegotiationOutcome::Rejected { reason: "negotiation rounds exhausted".into() });
        }
        let hi = req.latest.saturating_add(self.horizon_s);
        match earliest_feasible(&self.map, candidates, req.node_count, req.duration_s, req.earliest, hi) {
            Some((window, _)) => Ok(NegotiationOutcome::Counter {
                offer: CounterOffer {
                    original_request: req.clone(),
                    proposed_window: window,
                    proposed_node_count: req.node_count,
                    round: req.round,
                },
            }),
            None => Ok(NegotiationOutcome::Rejected { reason: "no feasible window within the horizon".into() }),
        }
    }

    /// Re-request exactly the proposed window one round later.
    pub fn accept_counter(
        &mut self,
        offer: &CounterOffer,
        candidates: &[NodeId],
    ) -> Result<NegotiationOutcome, ReservationError> {
        if offer.round >= self.max_rounds {
            return Ok(NegotiationOutcome::Rejected { reason: "negotiation rounds exhausted".into() });
        }
        let req = ReservationRequest {
            earliest: offer.proposed_window.start,
            latest: offer.proposed_window.end,
            duration_s: offer.proposed_window.duration_s(),
            node_count: offer.proposed_node_count,
            round: offer.round + 1,
            ..offer.original_request.clone()
        };
        self.request(&req, candidates)
    }

    pub fn cancel(&mut self, id: ReservationId) -> Result<(), ReservationError> {
        let r = self.reservations.get_mut(&id).ok_or(ReservationError::NotFound(id))?;
        if r.state != ReservationState::Confirmed {
            return Err(ReservationError::NotCancellable { id, state: r.state });
        }
        r.state = ReservationState::Cancelled;
        self.map.remove_reservation(id);
        Ok(())
    }

    /// Bind an application to a reservation owned by `user`.
    pub fn bind(&mut self, id: ReservationId, app: AppId, user: &str) -> Result<(), ReservationError> {
        let r = self.reservations.get_mut(&id).ok_or(ReservationError::NotFound(id))?;
        if r.owner != user {
            return Err(ReservationError::NotOwner(id));
        }
        if !matches!(r.state, ReservationState::Confirmed | ReservationState::Active) {
            return Err(ReservationError::InvalidRequest(format!("reservation {id} is {:?}", r.state)));
        }
        r.bound_app = Some(app);
        Ok(())
    }

    /// Activate reservations whose window holds `now`; expire those that
    /// ended at or before `now` and release their allocations.
    pub fn tick(&mut self, now: i64) -> Vec<ReservationTransition> {
        let mut out = Vec::new();
        let mut released = Vec::new();
        for r in self.reservations.values_mut() {
            if r.state == ReservationState::Confirmed && r.window.start <= now {
                out.push(ReservationTransition {
                    reservation_id: r.reservation_id,
                    from: r.state,
                    to: ReservationState::Active,
                });
                r.state = ReservationState::Active;
            }
            if r.state == ReservationState::Active && r.window.end <= now {
                out.push(ReservationTransition {
                    reservation_id: r.reservation_id,
                    from: r.state,
                    to: ReservationState::Expired,
                });
                r.state = ReservationState::Expired;
                released.push(r.reservation_id);
            }
        }
        for id in released {
            self.map.remove_reservation(id);
        }
        out
    }

    /// What one node's Allocation Manager should hold.
    pub fn node_view(&self, node: NodeId) -> Vec<super::NodeAllocation> {
        self.map
            .entries(node)
            .iter()
            .map(|e| super::NodeAllocation {
                window: e.window,
                reservation_id: e.reservation_id,
                bound_app: self.reservations.get(&e.reservation_id).and_then(|r| r.bound_app),
            })
            .collect()
    }

    /// Views for every node that has allocations.
    pub fn all_views(&self) -> BTreeMap<NodeId, Vec<super::NodeAllocation>> {
        self.map.nodes().map(|(n, _)| (*n, self.node_view(*n))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nodes(n: u128) -> Vec<NodeId> {
        (1..=n).map(NodeId::from_u128).collect()
    }

    #[test]
    fn window_boundaries() {
        let w = TimeWindow::new(10, 20).unwrap();
        assert!(w.contains(10));
        assert!(!w.contains(20));
        assert!(!w.overlaps(&TimeWindow::new(20, 30).unwrap()));
        assert!(w.overlaps(&TimeWindow::new(19, 30).unwrap()));
        assert!(TimeWindow::new(5, 5).is_err());
    }

    #[test]
    fn empty_cloud_confirms_with_lowest_ids() {
        let mut book = ReservationBook::default();
        let out = book.request(&ReservationRequest::new("u", 2, 0, 100, 10), &nodes(3)).unwrap();
        let NegotiationOutcome::Confirmed { reservation } = out else { panic!("{out:?}") };
        assert_eq!(reservation.node_ids, nodes(2));
        assert_eq!(reservation.window, TimeWindow { start: 0, end: 10 });
        assert_eq!(reservation.window.duration_s(), 10);
    }

    #[test]
    fn fully_booked_counters_at_window_end() {
        let mut book = ReservationBook::default();
        book.request(&ReservationRequest::new("a", 1, 100, 150, 50), &nodes(1)).unwrap();
        let out = book.request(&ReservationRequest::new("b", 1, 100, 150, 50), &nodes(1)).unwrap();
        let NegotiationOutcome::Counter { offer } = out else { panic!("{out:?}") };
        assert_eq!(offer.proposed_window, TimeWindow { start: 150, end: 200 });
        assert_eq!(offer.round, 0);
    }

    #[test]
    fn last_round_rejects_instead_of_countering() {
        let mut book = ReservationBook::default();
        book.request(&ReservationRequest::new("a", 1, 0, 10, 10), &nodes(1)).unwrap();
        let mut req = ReservationRequest::new("b", 1, 0, 10, 10);
        req.round = 3;
        assert_eq!(book.request(&req, &nodes(1)).unwrap().class(), "rejected");
    }

    #[test]
    fn accept_then_confirm_and_race_produces_new_counter() {
        let mut book = ReservationBook::default();
        book.request(&ReservationRequest::new("a", 1, 0, 10, 10), &nodes(1)).unwrap();
        let NegotiationOutcome::Counter { offer } =
            book.request(&ReservationRequest::new("b", 1, 0, 10, 10), &nodes(1)).unwrap()
        else {
            panic!()
        };
        let mut racer = book.clone();
        let out = book.accept_counter(&offer, &nodes(1)).unwrap();
        let NegotiationOutcome::Confirmed { reservation } = out else { panic!() };
        assert_eq!(reservation.window, offer.proposed_window);

        racer.request(&ReservationRequest::new("c", 1, 10, 20, 10), &nodes(1)).unwrap();
        let NegotiationOutcome::Counter { offer: again } = racer.accept_counter(&offer, &nodes(1)).unwrap() else {
            panic!()
        };
        assert_eq!(again.round, 1);
        assert!(again.proposed_window.start > offer.proposed_window.start);
    }

    #[test]
    fn exhausted_offer_is_rejected() {
        let mut book = ReservationBook::default();
        let offer = CounterOffer {
            original_request: ReservationRequest::new("a", 1, 0, 10, 10),
            proposed_window: TimeWindow { start: 0, end: 10 },
            proposed_node_count: 1,
            round: 3,
        };
        assert_eq!(book.accept_counter(&offer, &nodes(1)).unwrap().class(), "rejected");
    }

    #[test]
    fn tick_walks_states() {
        let mut book = ReservationBook::default();
        let NegotiationOutcome::Confirmed { reservation: r } =
            book.request(&ReservationRequest::new("a", 1, 10, 20, 10), &nodes(1)).unwrap()
        else {
            panic!()
        };
        assert!(book.tick(9).is_empty());
        assert_eq!(book.tick(10)[0].to, ReservationState::Active);
        assert!(book.tick(10).is_empty());
        assert_eq!(book.tick(20)[0].to, ReservationState::Expired);
        assert!(book.map().entries(NodeId::from_u128(1)).is_empty());
        assert_eq!(book.get(r.reservation_id).unwrap().state, ReservationState::Expired);
    }

    #[test]
    fn only_confirmed_can_cancel() {
        let mut book = ReservationBook::default();
        let NegotiationOutcome::Confirmed { reservation: r } =
            book.request(&ReservationRequest::new("a", 1, 10, 20, 10), &nodes(1)).unwrap()
        else {
            panic!()
        };
        book.tick(15);
        assert!(matches!(book.cancel(r.reservation_id), Err(ReservationError::NotCancellable { .. })));
        let NegotiationOutcome::Confirmed { reservation: r2 } =
            book.request(&ReservationRequest::new("a", 1, 30, 40, 10), &nodes(1)).unwrap()
        else {
            panic!()
        };
        book.cancel(r2.reservation_id).unwrap();
        assert_eq!(book.map().entries(NodeId::from_u128(1)).len(), 1);
    }

    #[test]
    fn invalid_requests() {
        let book = ReservationBook::default();
        assert!(ReservationRequest::new("a", 0, 0, 10, 5).validate(book.max_rounds).is_err());
        assert!(ReservationRequest::new("a", 1, 0, 4, 5).validate(book.max_rounds).is_err());
        let mut r = ReservationRequest::new("a", 1, 0, 10, 5);
        r.required_services = vec!["storage".into()];
        assert!(r.validate(book.max_rounds).is_err());
    }

    #[test]
    fn bind_requires_owner() {
        let mut book = ReservationBook::default();
        let NegotiationOutcome::Confirmed { reservation: r } =
            book.request(&ReservationRequest::new("a", 1, 10, 20, 10), &nodes(1)).unwrap()
        else {
            panic!()
        };
        let app = AppId::new();
        assert_eq!(book.bind(r.reservation_id, app, "b"), Err(ReservationError::NotOwner(r.reservation_id)));
        book.bind(r.reservation_id, app, "a").unwrap();
        assert_eq!(book.node_view(NodeId::from_u128(1))[0].bound_app, Some(app));
    }
}
