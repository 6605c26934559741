//! JSON-over-HTTP front door for the master's services.
//!
//! | method | path                       | body                    |
//! |--------|----------------------------|-------------------------|
//! | POST   | /applications              | `{model, display_name}` |
//! | POST   | /applications/{id}/jobs    | `{jobs: [JobSpec]}`     |
//! | GET    | /applications/{id}         |                         |
//! | POST   | /reservations              | `ReservationRequest`    |
//! | GET    | /nodes                     |                         |
//! | GET    | /stats                     |                         |
//!
//! Mutating requests need `Authorization: Bearer <user>:<token>`.

use std::net::SocketAddr;
use std::sync::Arc;

use async_trait::async_trait;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use super::stats::CloudStats;
use crate::container::{
    encode, unknown_kind, CallError, Container, Environment, Reply, Service, ServiceContext, ServiceEntry,
    ServiceResult,
};
use crate::directory::{MembershipRecord, QueryRequest, KIND_QUERY};
use crate::execution::{
    AppRef, ApplicationRecord, ApplicationView, CreateApp, JobSpec, Model, SchedulerStats, SubmitAck, SubmitJobs,
    KIND_APP_CREATE, KIND_APP_GET, KIND_STATS, KIND_SUBMIT,
};
use crate::ids::{now_ms, AppId};
use crate::reservation::{NegotiationOutcome, RequestMessage, Reservation, ReservationRequest, KIND_LIST, KIND_REQUEST};
use crate::storage::DataChannelSpec;
use crate::transversal::Credentials;
use crate::wire::{ServiceEnvelope, WireError};

pub const KIND_HTTP_ADDR: &str = "http.addr";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateApplicationBody {
    pub model: String,
    #[serde(default)]
    pub display_name: String,
    #[serde(default)]
    pub channels: Vec<DataChannelSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmitBody {
    pub jobs: Vec<JobSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

struct HttpError(StatusCode, WireError);

impl IntoResponse for HttpError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { code: self.1.code, message: self.1.message })).into_response()
    }
}

impl From<WireError> for HttpError {
    fn from(e: WireError) -> Self {
        let status = match e.code.as_str() {
            "Unauthorized" | "Unauthenticated" | "AuthFailed" => StatusCode::UNAUTHORIZED,
            "UnknownApplication" | "UnknownJob" | "NotFound" => StatusCode::NOT_FOUND,
            "InvalidRequest" | "InvalidJob" | "UnknownOperation" | "UnknownScheme" | "BadRequest"
            | "IllegalTransition" => StatusCode::UNPROCESSABLE_ENTITY,
            "Timeout" => StatusCode::GATEWAY_TIMEOUT,
            "UnknownService" | "Unreachable" | "NoCatalogue" => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        HttpError(status, e)
    }
}

impl From<CallError> for HttpError {
    fn from(e: CallError) -> Self {
        WireError::from(e).into()
    }
}

type HttpResult<T> = Result<T, HttpError>;

#[derive(Clone)]
struct ApiState {
    container: Container,
}

impl ApiState {
    async fn call<Req: Serialize, Resp: DeserializeOwned>(&self, service: &str, kind: &str, req: &Req) -> HttpResult<Resp> {
        let bytes = self.container.call(self.container.node_id(), service, kind, encode(req)).await?;
        serde_json::from_slice(&bytes).map_err(|e| WireError::new("Malformed", e.to_string()).into())
    }
}

fn bearer(headers: &HeaderMap) -> HttpResult<Credentials> {
    headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .and_then(|v| Credentials::from_bearer(v.trim()))
        .ok_or_else(|| HttpError(StatusCode::UNAUTHORIZED, WireError::new("Unauthorized", "missing bearer credentials")))
}

fn unprocessable(message: impl Into<String>) -> HttpError {
    HttpError(StatusCode::UNPROCESSABLE_ENTITY, WireError::new("InvalidRequest", message))
}

async fn create_application(
    State(st): State<ApiState>,
    headers: HeaderMap,
    Json(body): Json<CreateApplicationBody>,
) -> HttpResult<Json<ApplicationRecord>> {
    let credentials = bearer(&headers)?;
    let model: Model = body.model.parse().map_err(|e: String| unprocessable(e))?;
    let msg = CreateApp { credentials, model, display_name: body.display_name, channels: body.channels, shared_inputs: vec![] };
    Ok(Json(st.call("scheduler", KIND_APP_CREATE, &msg).await?))
}

async fn submit_jobs(
    State(st): State<ApiState>,
    Path(id): Path<AppId>,
    headers: HeaderMap,
    Json(body): Json<SubmitBody>,
) -> HttpResult<Json<SubmitAck>> {
    let credentials = bearer(&headers)?;
    let msg = SubmitJobs { credentials, app_id: id, jobs: body.jobs };
    Ok(Json(st.call("scheduler", KIND_SUBMIT, &msg).await?))
}

async fn get_application(State(st): State<ApiState>, Path(id): Path<AppId>, headers: HeaderMap) -> HttpResult<Json<ApplicationView>> {
    let credentials = bearer(&headers).unwrap_or_else(|_| Credentials::anonymous());
    Ok(Json(st.call("scheduler", KIND_APP_GET, &AppRef { credentials, app_id: id }).await?))
}

async fn post_reservation(
    State(st): State<ApiState>,
    headers: HeaderMap,
    Json(request): Json<ReservationRequest>,
) -> HttpResult<Response> {
    let credentials = bearer(&headers)?;
    let outcome: NegotiationOutcome = st.call("reservation", KIND_REQUEST, &RequestMessage { credentials, request }).await?;
    let status = match &outcome {
        NegotiationOutcome::Confirmed { .. } => StatusCode::OK,
        NegotiationOutcome::Counter { .. } => StatusCode::CONFLICT,
        NegotiationOutcome::Rejected { .. } => StatusCode::UNPROCESSABLE_ENTITY,
    };
    Ok((status, Json(outcome)).into_response())
}

async fn get_nodes(State(st): State<ApiState>) -> HttpResult<Json<Vec<MembershipRecord>>> {
    Ok(Json(st.call("directory", KIND_QUERY, &QueryRequest { service: None }).await?))
}

async fn get_stats(State(st): State<ApiState>) -> HttpResult<Json<CloudStats>> {
    let records: Vec<MembershipRecord> = st.call("directory", KIND_QUERY, &QueryRequest { service: None }).await?;
    let scheduler: SchedulerStats = st.call("scheduler", KIND_STATS, &()).await?;
    let reservations: Vec<Reservation> = st.call("reservation", KIND_LIST, &()).await?;
    Ok(Json(CloudStats::compute(&records, &scheduler, &reservations, now_ms())))
}

/// Router over a container that hosts the directory, scheduler and
/// reservation services.
pub fn router(container: Container) -> Router {
    Router::new()
        .route("/applications", post(create_application))
        .route("/applications/{id}", get(get_application))
        .route("/applications/{id}/jobs", post(submit_jobs))
        .route("/reservations", post(post_reservation))
        .route("/nodes", get(get_nodes))
        .route("/stats", get(get_stats))
        .with_state(ApiState { container })
}

/// Hosts [`router`] on the `listen` option (default `127.0.0.1:0`).
pub struct HttpService {
    listen: String,
    bound: Option<SocketAddr>,
    shutdown: Option<oneshot::Sender<()>>,
}

impl HttpService {
    pub fn from_entry(entry: &ServiceEntry, _env: &Arc<Environment>) -> Result<Self, String> {
        Ok(Self { listen: entry.opt_str("listen").unwrap_or("127.0.0.1:0").to_string(), bound: None, shutdown: None })
    }
}

#[async_trait]
impl Service for HttpService {
    async fn start(&mut self, ctx: &ServiceContext) -> Result<(), WireError> {
        let listener = tokio::net::TcpListener::bind(&self.listen)
            .await
            .map_err(|e| WireError::new("BindFailed", format!("{}: {e}", self.listen)))?;
        let addr = listener.local_addr().map_err(|e| WireError::new("BindFailed", e.to_string()))?;
        let (tx, rx) = oneshot::channel::<()>();
        let app = router(ctx.container());
        tokio::spawn(async move {
            let serve = axum::serve(listener, app).with_graceful_shutdown(async {
                let _ = rx.await;
            });
            if let Err(e) = serve.await {
                tracing::warn!(error = %e, "http server stopped");
            }
        });
        tracing::info!(%addr, "http api listening");
        self.bound = Some(addr);
        self.shutdown = Some(tx);
        Ok(())
    }

    async fn handle(&mut self, _ctx: &ServiceContext, request: ServiceEnvelope) -> ServiceResult {
        match request.kind.as_str() {
            KIND_HTTP_ADDR => Ok(Reply::json("http.addr", &self.bound.map(|a| a.to_string()))),
            _ => Err(unknown_kind(&request)),
        }
    }

    async fn stop(&mut self, _ctx: &ServiceContext) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}
