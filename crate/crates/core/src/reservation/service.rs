use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::admission::NodeAllocation;
use super::book::{CounterOffer, NegotiationOutcome, ReservationBook, ReservationError, ReservationRequest};
use crate::container::{
    decode, encode, unknown_kind, Environment, Reply, Service, ServiceContext, ServiceEntry, ServiceResult,
};
use crate::directory::{query_catalogue, LivenessState};
use crate::ids::{now_secs, AppId, NodeId, ReservationId};
use crate::transversal::{Action, Credentials};
use crate::wire::{ServiceEnvelope, WireError};

pub const KIND_REQUEST: &str = "res.request";
pub const KIND_ACCEPT: &str = "res.accept";
pub const KIND_CANCEL: &str = "res.cancel";
pub const KIND_BIND: &str = "res.bind";
pub const KIND_LIST: &str = "res.list";
pub const KIND_TICK: &str = "res.tick";
/// Pushed to executors and schedulers whenever the map changes.
pub const KIND_ALLOC_SYNC: &str = "alloc.sync";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RequestMessage {
    pub credentials: Credentials,
    pub request: ReservationRequest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AcceptMessage {
    pub credentials: Credentials,
    pub offer: CounterOffer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CancelMessage {
    pub credentials: Credentials,
    pub reservation_id: ReservationId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BindMessage {
    pub credentials: Credentials,
    pub reservation_id: ReservationId,
    pub app_id: AppId,
}

/// Whole-map copy; receivers ignore versions older than what they hold.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationSync {
    pub version: u64,
    pub windows: BTreeMap<NodeId, Vec<NodeAllocation>>,
}

/// Holds the global allocation map and answers negotiation messages.
pub struct ReservationService {
    book: ReservationBook,
    env: Arc<Environment>,
    tick_period: Duration,
    version: u64,
    ticks: u64,
}

impl ReservationService {
    /// Options: `max_rounds` (3), `horizon_s` (86400), `tick_ms` (1000).
    pub fn from_entry(entry: &ServiceEntry, env: &Arc<Environment>) -> Result<Self, String> {
        let max_rounds = entry.opt_u64("max_rounds").unwrap_or(super::DEFAULT_MAX_ROUNDS as u64) as u32;
        let horizon_s = entry.opt_u64("horizon_s").unwrap_or(super::DEFAULT_HORIZON_S as u64) as i64;
        let mut book = ReservationBook::new(max_rounds, horizon_s);
        if let Some(snapshot) = &env.restored {
            book.restore(snapshot.reservations.clone(), snapshot.allocation_map.clone());
        }
        Ok(Self {
            book,
            env: env.clone(),
            tick_period: Duration::from_millis(entry.opt_u64("tick_ms").unwrap_or(1000)),
            version: 0,
            ticks: 0,
        })
    }

    fn authenticate(&self, credentials: &Credentials, resource: &str) -> Result<String, WireError> {
        self.env
            .security
            .check(credentials, Action::Reserve, resource)
            .map(|p| p.user_id)
            .map_err(|_| ReservationError::Unauthenticated.into())
    }

    async fn candidates(&self, ctx: &ServiceContext, required: &[String]) -> Result<Vec<NodeId>, WireError> {
        let records = query_catalogue(&ctx.container(), Some("executor")).await?;
        Ok(records
            .into_iter()
            .filter(|r| r.state == LivenessState::Alive && required.iter().all(|s| r.hosts(s)))
            .map(|r| r.node_id)
            .collect())
    }

    /// Record the change durably and push fresh copies to the nodes.
    fn changed(&mut self, ctx: &ServiceContext) {
        let reservations: Vec<_> = self.book.reservations().cloned().collect();
        let map = self.book.map().clone();
        self.env.hub.update(|s| {
            s.reservations = reservations;
            s.allocation_map = map;
        });
        if let Err(e) = self.env.hub.persist_now() {
            tracing::warn!(error = %e, "reservation snapshot failed");
        }
        self.push(ctx);
    }

    fn push(&mut self, ctx: &ServiceContext) {
        self.version += 1;
        let sync = AllocationSync { version: self.version, windows: self.book.all_views() };
        let container = ctx.container();
        ctx.spawn(async move {
            let targets = match query_catalogue(&container, None).await {
                Ok(records) => records,
                Err(e) => {
                    tracing::debug!(error = %e, "cannot reach catalogue for allocation push");
                    return;
                }
            };
            let payload = encode(&sync);
            for r in targets.iter().filter(|r| {
                r.state != LivenessState::Dead && (r.hosts("executor") || r.hosts("scheduler"))
            }) {
                for service in ["executor", "scheduler"].into_iter().filter(|s| r.hosts(s)) {
                    if let Err(e) = container.call(r.node_id, service, KIND_ALLOC_SYNC, payload.clone()).await {
                        tracing::debug!(node = %r.node_id, error = %e, "allocation push failed");
                    }
                }
            }
        });
    }
}

#[async_trait]
impl Service for ReservationService {
    async fn start(&mut self, ctx: &ServiceContext) -> Result<(), WireError> {
        ctx.every(self.tick_period, KIND_TICK);
        Ok(())
    }

    async fn handle(&mut self, ctx: &ServiceContext, request: ServiceEnvelope) -> ServiceResult {
        match request.kind.as_str() {
            KIND_REQUEST => {
                let msg: RequestMessage = decode(&request.payload)?;
                let user = self.authenticate(&msg.credentials, "reservations")?;
                let mut req = msg.request;
                req.requester = user;
                req.validate(self.book.max_rounds).map_err(WireError::from)?;
                let candidates = self.candidates(ctx, &req.required_services).await?;
                let outcome = self.book.request(&req, &candidates)?;
                if matches!(outcome, NegotiationOutcome::Confirmed { .. }) {
                    self.book.tick(now_secs());
                    self.changed(ctx);
                }
                Ok(Reply::json("res.outcome", &outcome))
            }
            KIND_ACCEPT => {
                let msg: AcceptMessage = decode(&request.payload)?;
                let user = self.authenticate(&msg.credentials, "reservations")?;
                let mut offer = msg.offer;
                offer.original_request.requester = user;
                let candidates = self.candidates(ctx, &offer.original_request.required_services).await?;
                let outcome = self.book.accept_counter(&offer, &candidates)?;
                if matches!(outcome, NegotiationOutcome::Confirmed { .. }) {
                    self.book.tick(now_secs());
                    self.changed(ctx);
                }
                Ok(Reply::json("res.outcome", &outcome))
            }
            KIND_CANCEL => {
                let msg: CancelMessage = decode(&request.payload)?;
                let user = self.authenticate(&msg.credentials, "reservations")?;
                let owner = self.book.get(msg.reservation_id).map(|r| r.owner.clone());
                match owner {
                    None => return Err(ReservationError::NotFound(msg.reservation_id).into()),
                    Some(o) if o != user => return Err(ReservationError::NotOwner(msg.reservation_id).into()),
                    Some(_) => {}
                }
                self.book.cancel(msg.reservation_id)?;
                self.changed(ctx);
                Ok(Reply::ack())
            }
            KIND_BIND => {
                let msg: BindMessage = decode(&request.payload)?;
                let user = self.authenticate(&msg.credentials, "reservations")?;
                self.book.bind(msg.reservation_id, msg.app_id, &user)?;
                self.changed(ctx);
                Ok(Reply::ack())
            }
            KIND_LIST => {
                let all: Vec<_> = self.book.reservations().cloned().collect();
                Ok(Reply::json("res.list", &all))
            }
            KIND_TICK => {
                self.ticks += 1;
                let transitions = self.book.tick(now_secs());
                for t in &transitions {
                    tracing::info!(reservation = %t.reservation_id, from = ?t.from, to = ?t.to, "reservation transition");
                }
                if !transitions.is_empty() {
                    self.changed(ctx);
                } else if self.ticks % 5 == 0 {
                    self.push(ctx);
                }
                Ok(Reply::json("res.transitions", &transitions))
            }
            _ => Err(unknown_kind(&request)),
        }
    }
}
