//! HTTP API over a shared backend. Every body is JSON with a
//! `schema_version` field; errors carry `error.code` and `error.message`.

use std::collections::BTreeSet;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query as QueryArgs, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, CorsLayer};

use makesense::analytics::quality::{group_readings, quality_compare, QualityError};
use makesense::analytics::{ComfortError, ComfortPreference};
use makesense::backend::{Backend, BackendError, StreamFilter, DEFAULT_SUBSCRIBER_BUFFER};
use makesense::datastore::Query;
use makesense::fota::FotaError;
use makesense::lwm2m::server::OpId;
use makesense::lwm2m::{Lwm2mError, LwPath, OBJ_ENERGY, OBJ_WRISTBAND};
use makesense::{Clock, Timestamp};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOKEN_ENV: &str = "MAKESENSE_TOKEN";

#[derive(Clone, Debug)]
pub struct ApiConfig {
    pub bind: SocketAddr,
    pub token: String,
    pub cors_origins: Vec<String>,
}

#[derive(Clone)]
pub struct AppState {
    backend: Arc<Mutex<Backend>>,
    clock: Arc<dyn Clock>,
    token: Arc<str>,
    stream_poll: Duration,
}

impl AppState {
    pub fn new(backend: Arc<Mutex<Backend>>, clock: Arc<dyn Clock>, token: &str) -> Self {
        AppState {
            backend,
            clock,
            token: token.into(),
            stream_poll: Duration::from_millis(200),
        }
    }

    pub fn with_stream_poll(mut self, every: Duration) -> Self {
        self.stream_poll = every;
        self
    }

    fn lock(&self) -> (MutexGuard<'_, Backend>, Timestamp) {
        let b = self.backend.lock().unwrap_or_else(|e| e.into_inner());
        (b, self.clock.now())
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(m: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", m)
    }

    fn not_found(m: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "not_found", m)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "schema_version": SCHEMA_VERSION,
            "error": {"code": self.code, "message": self.message},
        });
        (self.status, Json(body)).into_response()
    }
}

impl From<BackendError> for ApiError {
    fn from(e: BackendError) -> Self {
        let m = e.to_string();
        match e {
            BackendError::UnknownEndpoint(_) => ApiError::not_found(m),
            BackendError::Comfort(ComfortError::StalePreference(_)) => ApiError::not_found(m),
            BackendError::Comfort(_) | BackendError::Diary(_) => ApiError::bad_request(m),
            BackendError::Fota(FotaError::UnknownVersion(_)) => ApiError::not_found(m),
            BackendError::Fota(FotaError::Io(_)) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", m),
            BackendError::Fota(_) => ApiError::bad_request(m),
            BackendError::Lwm2m(Lwm2mError::NotRegistered(_) | Lwm2mError::UnknownRegistration(_)) => {
                ApiError::not_found(m)
            }
            BackendError::Lwm2m(_) => ApiError::bad_request(m),
            BackendError::Store(_) | BackendError::Io(_) => {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", m)
            }
        }
    }
}

type ApiResult = Result<Response, ApiError>;

fn ok<T: Serialize>(data: T) -> ApiResult {
    Ok(Json(json!({"schema_version": SCHEMA_VERSION, "data": data})).into_response())
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

fn parse_path(s: &str) -> Result<LwPath, ApiError> {
    s.parse().map_err(|_| ApiError::bad_request(format!("bad path {s:?}")))
}

/// Unix milliseconds or RFC 3339.
fn parse_time(s: &str) -> Result<Timestamp, ApiError> {
    s.parse::<i64>()
        .map(Timestamp)
        .ok()
        .or_else(|| Timestamp::parse_rfc3339(s))
        .ok_or_else(|| ApiError::bad_request(format!("bad time {s:?}")))
}

async fn require_token(State(st): State<AppState>, req: Request, next: Next) -> Response {
    let header_ok = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|t| t == &*st.token);
    // EventSource cannot set headers, so the stream also takes ?token=
    let query_ok = req
        .uri()
        .query()
        .into_iter()
        .flat_map(|q| q.split('&'))
        .any(|kv| kv.strip_prefix("token=") == Some(&*st.token));
    if header_ok || query_ok {
        next.run(req).await
    } else {
        ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token").into_response()
    }
}

pub fn router(state: AppState, cors_origins: &[String]) -> Router {
    let api = Router::new()
        .route("/clients", get(list_clients))
        .route("/clients/:ep", get(get_client))
        .route("/clients/:ep/observe", post(observe))
        .route("/clients/:ep/write", post(write))
        .route("/clients/:ep/execute", post(execute))
        .route("/ops/:id", get(get_op))
        .route("/blacklist", get(get_blacklist).post(post_blacklist))
        .route("/data", get(get_data))
        .route("/live", get(get_live))
        .route("/stream", get(stream))
        .route("/diary", get(get_diary))
        .route("/presence", get(get_presence))
        .route("/comfort", get(list_comfort))
        .route("/comfort/:desk", get(get_comfort).post(post_comfort))
        .route("/comfort/:desk/:action", post(comfort_switch))
        .route("/fota", get(get_fota).post(post_fota))
        .route("/fota/images", get(list_images).post(upload_image))
        .route("/quality", get(get_quality))
        .route("/health", get(health))
        .route("/metrics", get(metrics))
        .fallback(|| async { ApiError::not_found("no such route") })
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state);
    let origins: Vec<HeaderValue> = cors_origins.iter().filter_map(|o| o.parse().ok()).collect();
    let cors = CorsLayer::new()
        .allow_origin(AllowOrigin::list(origins))
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::AUTHORIZATION, header::CONTENT_TYPE]);
    Router::new().nest("/api", api).layer(cors)
}

async fn list_clients(State(st): State<AppState>) -> ApiResult {
    let (b, _) = st.lock();
    ok(b.devices())
}

async fn get_client(State(st): State<AppState>, Path(ep): Path<String>) -> ApiResult {
    let (b, _) = st.lock();
    let canonical = b
        .canonical_endpoint(&ep)
        .ok_or_else(|| ApiError::not_found(format!("unknown endpoint {ep}")))?;
    let info = b
        .devices()
        .into_iter()
        .find(|d| d.endpoint == canonical)
        .ok_or_else(|| ApiError::not_found(format!("{ep} is not registered")))?;
    ok(info)
}

#[derive(Deserialize)]
struct ObserveBody {
    path: String,
    period_s: f64,
}

#[derive(Deserialize)]
struct WriteBody {
    path: String,
    value: Value,
}

#[derive(Deserialize)]
struct ExecuteBody {
    path: String,
}

fn op_created(op: OpId) -> ApiResult {
    ok(json!({ "op": op }))
}

async fn observe(State(st): State<AppState>, Path(ep): Path<String>, body: Bytes) -> ApiResult {
    let req: ObserveBody = parse_body(&body)?;
    let path = parse_path(&req.path)?;
    if !(req.period_s.is_finite() && req.period_s > 0.0) {
        return Err(ApiError::bad_request("period_s must be positive"));
    }
    let (mut b, now) = st.lock();
    let op = b.observe(&ep, path, Duration::from_secs_f64(req.period_s), now)?;
    op_created(op)
}

async fn write(State(st): State<AppState>, Path(ep): Path<String>, body: Bytes) -> ApiResult {
    let req: WriteBody = parse_body(&body)?;
    let path = parse_path(&req.path)?;
    let value = match &req.value {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        Value::Bool(v) => v.to_string(),
        _ => return Err(ApiError::bad_request("value must be a string, number or boolean")),
    };
    let (mut b, now) = st.lock();
    let op = b.write(&ep, path, &value, now)?;
    op_created(op)
}

async fn execute(State(st): State<AppState>, Path(ep): Path<String>, body: Bytes) -> ApiResult {
    let req: ExecuteBody = parse_body(&body)?;
    let path = parse_path(&req.path)?;
    let (mut b, now) = st.lock();
    let op = b.execute(&ep, path, now)?;
    op_created(op)
}

async fn get_op(State(st): State<AppState>, Path(id): Path<u64>) -> ApiResult {
    let (b, _) = st.lock();
    match b.op_result(OpId(id)) {
        Some(r) => ok(r),
        None => Err(ApiError::not_found(format!("unknown op {id}"))),
    }
}

#[derive(Serialize)]
struct BlacklistRow {
    endpoint: String,
    path: Option<String>,
}

async fn get_blacklist(State(st): State<AppState>) -> ApiResult {
    let (b, _) = st.lock();
    let rows: Vec<BlacklistRow> = b
        .blacklist()
        .into_iter()
        .map(|(endpoint, path)| BlacklistRow {
            endpoint,
            path: path.map(|p| p.to_string()),
        })
        .collect();
    ok(rows)
}

#[derive(Deserialize)]
struct BlacklistBody {
    endpoint: String,
    #[serde(default)]
    path: Option<String>,
    #[serde(default)]
    remove: bool,
}

async fn post_blacklist(State(st): State<AppState>, body: Bytes) -> ApiResult {
    let req: BlacklistBody = parse_body(&body)?;
    let path = req.path.as_deref().map(parse_path).transpose()?;
    let (mut b, now) = st.lock();
    let changed = if req.remove {
        b.blacklist_remove(&req.endpoint, path, now)?
    } else {
        b.blacklist_add(&req.endpoint, path, now)?
    };
    ok(json!({ "changed": changed }))
}

#[derive(Deserialize, Default)]
struct DataArgs {
    site: Option<String>,
    endpoint: Option<String>,
    object_id: Option<u16>,
    t0: Option<String>,
    t1: Option<String>,
    limit: Option<usize>,
    #[serde(default)]
    downsample: bool,
}

async fn get_data(State(st): State<AppState>, QueryArgs(a): QueryArgs<DataArgs>) -> ApiResult {
    let (b, now) = st.lock();
    let t0 = a.t0.as_deref().map(parse_time).transpose()?.unwrap_or(Timestamp::ZERO);
    let t1 = match a.t1.as_deref() {
        Some(s) => parse_time(s)?,
        None => now + Duration::from_secs(1),
    };
    let endpoint = match a.endpoint {
        Some(e) => Some(
            b.canonical_endpoint(&e)
                .ok_or_else(|| ApiError::not_found(format!("unknown endpoint {e}")))?,
        ),
        None => None,
    };
    let q = Query {
        site: a.site,
        endpoint,
        object_id: a.object_id,
        t0,
        t1,
        limit: a.limit,
        downsample: a.downsample,
    };
    ok(b.query(&q)?)
}

#[derive(Deserialize)]
struct LiveArgs {
    endpoint: Option<String>,
}

async fn get_live(State(st): State<AppState>, QueryArgs(a): QueryArgs<LiveArgs>) -> ApiResult {
    let (b, _) = st.lock();
    let live = b.live();
    let filter = match a.endpoint {
        Some(e) => Some(
            b.canonical_endpoint(&e)
                .ok_or_else(|| ApiError::not_found(format!("unknown endpoint {e}")))?,
        ),
        None => None,
    };
    let latest: Vec<_> = live
        .series()
        .into_iter()
        .filter(|(ep, _)| filter.as_ref().is_none_or(|f| f == ep))
        .filter_map(|(ep, obj)| live.latest(&ep, obj).cloned())
        .collect();
    ok(latest)
}

async fn stream(
    State(st): State<AppState>,
    QueryArgs(filter): QueryArgs<StreamFilter>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let mut filter = filter;
    let sub = {
        let (mut b, _) = st.lock();
        if let Some(e) = &filter.endpoint {
            filter.endpoint = Some(
                b.canonical_endpoint(e)
                    .ok_or_else(|| ApiError::not_found(format!("unknown endpoint {e}")))?,
            );
        }
        b.subscribe(filter, DEFAULT_SUBSCRIBER_BUFFER)
    };
    let every = st.stream_poll;
    let events = futures::stream::unfold((sub, 0u64), move |(sub, reported)| async move {
        loop {
            let items = sub.drain();
            let dropped = sub.dropped();
            if items.is_empty() && dropped == reported {
                tokio::time::sleep(every).await;
                continue;
            }
            let mut batch = Vec::with_capacity(items.len() + 1);
            if dropped != reported {
                let body = json!({"schema_version": SCHEMA_VERSION, "dropped": dropped});
                batch.push(Ok(Event::default().event("dropped").data(body.to_string())));
            }
            for item in items {
                let body = json!({"schema_version": SCHEMA_VERSION, "data": item});
                batch.push(Ok(Event::default().event(item.kind()).data(body.to_string())));
            }
            return Some((futures::stream::iter(batch), (sub, dropped)));
        }
    });
    use futures::StreamExt;
    Ok(Sse::new(events.flatten()).keep_alive(KeepAlive::default()))
}

#[derive(Deserialize)]
struct DiaryArgs {
    site: String,
    t0: Option<String>,
    t1: Option<String>,
}

async fn get_diary(State(st): State<AppState>, QueryArgs(a): QueryArgs<DiaryArgs>) -> ApiResult {
    let (b, now) = st.lock();
    let t0 = a.t0.as_deref().map(parse_time).transpose()?.unwrap_or(Timestamp::ZERO);
    let t1 = a.t1.as_deref().map(parse_time).transpose()?.unwrap_or(now);
    ok(b.diary().overlay(&a.site, t0, t1))
}

#[derive(Deserialize)]
struct PresenceArgs {
    site: String,
    band: u16,
}

async fn get_presence(State(st): State<AppState>, QueryArgs(a): QueryArgs<PresenceArgs>) -> ApiResult {
    let (b, now) = st.lock();
    match b.presence(&a.site, a.band, now) {
        Some(p) => ok(p),
        None => Err(ApiError::not_found(format!("no presence data for site {}", a.site))),
    }
}

async fn list_comfort(State(st): State<AppState>) -> ApiResult {
    let (b, _) = st.lock();
    ok(b.comfort().desks())
}

async fn get_comfort(State(st): State<AppState>, Path(desk): Path<String>) -> ApiResult {
    let (b, now) = st.lock();
    let c = b.comfort();
    let endpoint = c
        .endpoint_of(&desk)
        .ok_or_else(|| ApiError::not_found(format!("unknown desk {desk}")))?;
    let events: Vec<_> = c.events().iter().filter(|e| e.desk == desk).cloned().collect();
    ok(json!({
        "desk": desk,
        "endpoint": endpoint,
        "preference": c.preference(&desk).ok(),
        "occupied": c.is_occupied(&desk, now),
        "events": events,
    }))
}

async fn post_comfort(State(st): State<AppState>, Path(desk): Path<String>, body: Bytes) -> ApiResult {
    let mut pref: ComfortPreference = {
        let mut v: Value = parse_body(&body)?;
        if let Some(o) = v.as_object_mut() {
            o.insert("desk".into(), Value::String(desk.clone()));
        }
        serde_json::from_value(v).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))?
    };
    let (mut b, _) = st.lock();
    if let Ok(old) = b.comfort().preference(&desk) {
        pref.monitoring = pref.monitoring || old.monitoring;
    }
    b.set_preference(pref.clone())?;
    ok(pref)
}

async fn comfort_switch(State(st): State<AppState>, Path((desk, action)): Path<(String, String)>) -> ApiResult {
    let on = match action.as_str() {
        "start" => true,
        "stop" => false,
        _ => return Err(ApiError::not_found(format!("no action {action}"))),
    };
    let (mut b, _) = st.lock();
    b.set_monitoring(&desk, on)?;
    ok(json!({"desk": desk, "monitoring": on}))
}

#[derive(Deserialize)]
struct FotaBody {
    version: String,
    #[serde(default)]
    targets: Option<Vec<String>>,
}

async fn post_fota(State(st): State<AppState>, body: Bytes) -> ApiResult {
    let req: FotaBody = parse_body(&body)?;
    let (mut b, now) = st.lock();
    let targets = b.fota_push(&req.version, req.targets.as_deref(), now)?;
    ok(json!({"version": req.version, "targets": targets}))
}

async fn get_fota(State(st): State<AppState>) -> ApiResult {
    let (b, _) = st.lock();
    ok(b.fota_progress())
}

async fn list_images(State(st): State<AppState>) -> ApiResult {
    let (b, _) = st.lock();
    ok(b.images().versions())
}

async fn upload_image(State(st): State<AppState>, body: Bytes) -> ApiResult {
    let (mut b, _) = st.lock();
    let version = b.add_image(&body)?;
    ok(json!({ "version": version }))
}

#[derive(Deserialize)]
struct QualityArgs {
    site: Option<String>,
    t0: String,
    t1: String,
}

async fn get_quality(State(st): State<AppState>, QueryArgs(a): QueryArgs<QualityArgs>) -> ApiResult {
    let t0 = parse_time(&a.t0)?;
    let t1 = parse_time(&a.t1)?;
    if t1 <= t0 {
        return Err(ApiError::bad_request("t1 must be after t0"));
    }
    let (b, _) = st.lock();
    let readings: Vec<_> = b
        .query(&Query {
            site: a.site,
            ..Query::range(t0, t1)
        })?
        .readings()
        .into_iter()
        .filter(|r| r.object_id != OBJ_WRISTBAND && r.object_id != OBJ_ENERGY)
        .collect();
    let eggs: Vec<String> = readings
        .iter()
        .map(|r| r.endpoint.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let period = b.config.collector.default_period.as_millis().max(1);
    let expected = (t1.saturating_sub(t0).as_millis() / period) as usize;
    match quality_compare(&eggs, &group_readings::<f64>(&readings), expected) {
        Ok(report) => ok(json!({
            "expected": expected,
            "flagged": report.flagged(),
            "rows": report.rows,
        })),
        Err(e @ (QualityError::InsufficientData { .. } | QualityError::Empty)) => Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "insufficient_data",
            e.to_string(),
        )),
    }
}

async fn health(State(st): State<AppState>) -> ApiResult {
    let (b, _) = st.lock();
    let h = b.health();
    let status = if h.status == "failed" {
        StatusCode::SERVICE_UNAVAILABLE
    } else {
        StatusCode::OK
    };
    let mut resp = ok(h)?;
    *resp.status_mut() = status;
    Ok(resp)
}

async fn metrics(State(st): State<AppState>) -> ApiResult {
    let (b, _) = st.lock();
    ok(b.metrics())
}

/// Serves the API until `shutdown` resolves.
pub async fn serve(
    cfg: &ApiConfig,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(cfg.bind).await?;
    log::info!("api listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state, &cfg.cors_origins))
        .with_graceful_shutdown(shutdown)
        .await
}
