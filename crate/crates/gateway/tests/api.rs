use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use makesense::backend::{Backend, BackendConfig};
use makesense::eggsim::scenario::SignalOverride;
use makesense::eggsim::{fleet_keys, FaultPlan, ScenarioSpec};
use makesense::sim::{backend_addr, build_devices, device_addr, Testbed};
use makesense::{Timestamp, VirtualClock};
use makesense_gateway::api::{router, AppState, SCHEMA_VERSION};

const TOKEN: &str = "s3cret";

struct Rig {
    tb: Testbed<Arc<Mutex<Backend>>>,
    clock: Arc<VirtualClock>,
    app: Router,
    _dir: tempfile::TempDir,
}

impl Rig {
    fn new(eggs: usize) -> Rig {
        let mut spec = ScenarioSpec::office(eggs, 11);
        // someone sits at every desk
        spec.signals.push(SignalOverride {
            sensor: 3330,
            baseline: 40.0,
            amplitude: 0.0,
            sigma: 0.0,
            min: 0.0,
            max: 150.0,
        });
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = BackendConfig::new(backend_addr(), dir.path(), fleet_keys(spec.seed, &spec.devices()));
        cfg.collector.default_site = spec.default_site().to_string();
        cfg.collector.default_period = spec.sample_interval();
        let backend = Arc::new(Mutex::new(Backend::open(cfg).unwrap()));
        let devices = build_devices(&spec, &FaultPlan::default(), backend_addr(), device_addr);
        let tb = Testbed::new(backend.clone(), devices, spec.start());
        let clock = Arc::new(VirtualClock::new(spec.start()));
        let state = AppState::new(backend, clock.clone(), TOKEN).with_stream_poll(Duration::from_millis(5));
        let app = router(state, &["http://localhost:3000".to_string()]);
        Rig { tb, clock, app, _dir: dir }
    }

    fn run_for(&mut self, secs: u64) {
        self.tb.run_for(Duration::from_secs(secs));
        self.clock.set(self.tb.now());
    }

    fn now(&self) -> Timestamp {
        self.tb.now()
    }

    async fn call(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let mut req = Request::builder()
            .method(method)
            .uri(uri)
            .header("authorization", format!("Bearer {TOKEN}"));
        let body = match body {
            Some(v) => {
                req = req.header("content-type", "application/json");
                Body::from(v.to_string())
            }
            None => Body::empty(),
        };
        send(&self.app, req.body(body).unwrap()).await
    }

    async fn get(&self, uri: &str) -> (StatusCode, Value) {
        self.call("GET", uri, None).await
    }

    async fn post(&self, uri: &str, body: Value) -> (StatusCode, Value) {
        self.call("POST", uri, Some(body)).await
    }
}

fn rows(b: &Value) -> usize {
    b["data"]["rows"].as_array().unwrap_or_else(|| panic!("{b}")).len()
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, v)
}

#[tokio::test]
async fn token_is_required_everywhere() {
    let rig = Rig::new(2);
    for uri in ["/api/clients", "/api/health", "/api/metrics", "/api/stream"] {
        let req = Request::get(uri).body(Body::empty()).unwrap();
        let (status, body) = send(&rig.app, req).await;
        assert_eq!(status, StatusCode::UNAUTHORIZED, "{uri}");
        assert_eq!(body["error"]["code"], "unauthorized");
        assert_eq!(body["schema_version"], SCHEMA_VERSION);

        let req = Request::get(uri).header("authorization", "Bearer wrong").body(Body::empty()).unwrap();
        assert_eq!(send(&rig.app, req).await.0, StatusCode::UNAUTHORIZED);
    }
    let req = Request::get(format!("/api/health?token={TOKEN}")).body(Body::empty()).unwrap();
    assert_eq!(send(&rig.app, req).await.0, StatusCode::OK);
}

#[tokio::test]
async fn errors_are_structured() {
    let mut rig = Rig::new(2);
    rig.run_for(10);
    let (s, b) = rig.get("/api/nope").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(b["error"]["code"], "not_found");

    let (s, b) = rig.get("/api/clients/egg-999").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(b["schema_version"], SCHEMA_VERSION);

    let req = Request::post("/api/blacklist")
        .header("authorization", format!("Bearer {TOKEN}"))
        .body(Body::from("{not json"))
        .unwrap();
    let (s, b) = send(&rig.app, req).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(b["error"]["code"], "bad_request");

    let (s, _) = rig.post("/api/clients/egg-000/observe", json!({"path": "/3303/0/5700", "period_s": -1})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = rig.post("/api/clients/egg-000/write", json!({"path": "not/a/path", "value": 1})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = rig.get("/api/data?t0=yesterday").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = rig.get("/api/ops/999999").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn clients_data_and_health() {
    let mut rig = Rig::new(4);
    rig.run_for(30);
    let (s, b) = rig.get("/api/clients").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b["schema_version"], SCHEMA_VERSION);
    let clients = b["data"].as_array().unwrap();
    assert_eq!(clients.len(), 4);
    let ep = clients[0]["endpoint"].as_str().unwrap().to_string();
    assert!(!ep.contains('.'), "raw endpoint exposed: {ep}");

    let (s, one) = rig.get("/api/clients/egg-002").await;
    assert_eq!(s, StatusCode::OK);
    assert!(one["data"]["endpoint"].as_str().unwrap().ends_with("-egg-002"));

    let (s, b) = rig.get("/api/data?endpoint=egg-001&object_id=3303").await;
    assert_eq!(s, StatusCode::OK);
    let n = rows(&b);
    // one reading per second after the first full period
    assert!((25..=30).contains(&n), "{n}");

    let (s, b) = rig.get("/api/live?endpoint=egg-001").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b["data"].as_array().unwrap().len(), 7);

    let (s, b) = rig.get("/api/health").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b["data"]["status"], "ok");
    assert_eq!(b["data"]["registered"], 4);

    let (s, b) = rig.get("/api/metrics").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b["data"]["registered"], 4);
    assert!(b["data"]["stored"].as_u64().unwrap() > 0);
}

#[tokio::test]
async fn write_completes_as_an_operation() {
    let mut rig = Rig::new(2);
    rig.run_for(10);
    let (s, b) = rig.post("/api/clients/egg-001/write", json!({"path": "/3/0/13", "value": 1704067300})).await;
    assert_eq!(s, StatusCode::OK, "{b}");
    let op = b["data"]["op"].as_u64().unwrap();
    rig.run_for(2);
    let (s, b) = rig.get(&format!("/api/ops/{op}")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b["data"]["done"], true, "{b}");
    assert_eq!(b["data"]["success"], true, "{b}");
}

#[tokio::test]
async fn blacklist_stops_storage_for_that_object() {
    let mut rig = Rig::new(2);
    rig.run_for(10);
    let (s, b) = rig.post("/api/blacklist", json!({"endpoint": "egg-000", "path": "/3303"})).await;
    assert_eq!(s, StatusCode::OK, "{b}");
    assert_eq!(b["data"]["changed"], true);
    let (_, b) = rig.get("/api/blacklist").await;
    assert_eq!(b["data"].as_array().unwrap().len(), 1);

    let cut = rig.now().as_millis() + 2000;
    rig.run_for(20);
    let after = |ep: &str, obj: u16| format!("/api/data?endpoint={ep}&object_id={obj}&t0={cut}");
    let (_, b) = rig.get(&after("egg-000", 3303)).await;
    assert_eq!(rows(&b), 0, "{b}");
    let (_, b) = rig.get(&after("egg-000", 3304)).await;
    assert!(rows(&b) >= 15);
    let (_, b) = rig.get(&after("egg-001", 3303)).await;
    assert!(rows(&b) >= 15);

    let (s, b) = rig.post("/api/blacklist", json!({"endpoint": "egg-000", "path": "/3303", "remove": true})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b["data"]["changed"], true);
    let cut = rig.now().as_millis() + 2000;
    rig.run_for(20);
    let (_, b) = rig.get(&format!("/api/data?endpoint=egg-000&object_id=3303&t0={cut}")).await;
    assert!(rows(&b) >= 15, "{b}");
}

#[tokio::test]
async fn comfort_monitoring_emits_on_the_stream() {
    let mut rig = Rig::new(2);
    rig.run_for(5);
    let (s, b) = rig.get("/api/comfort").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b["data"], json!(["desk-0", "desk-1"]));

    let (s, b) = rig
        .post("/api/comfort/desk-1", json!({"temperature": 10.0, "email": "someone@example.org"}))
        .await;
    assert_eq!(s, StatusCode::OK, "{b}");
    let (s, _) = rig.post("/api/comfort/desk-1/start", json!({})).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _) = rig.post("/api/comfort/desk-9/start", json!({})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let req = Request::get(format!("/api/stream?object_id=3303&token={TOKEN}"))
        .body(Body::empty())
        .unwrap();
    let resp = rig.app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    let mut body = resp.into_body();

    rig.run_for(30);
    let mut text = String::new();
    while !text.contains("event: comfort") {
        let frame = tokio::time::timeout(Duration::from_secs(5), body.frame())
            .await
            .expect("stream stalled")
            .unwrap()
            .unwrap();
        if let Ok(d) = frame.into_data() {
            text.push_str(std::str::from_utf8(&d).unwrap());
        }
    }
    assert!(text.contains("event: reading"));
    let comfort = text
        .split("\n\n")
        .find(|e| e.contains("event: comfort"))
        .unwrap();
    let data: Value = serde_json::from_str(comfort.split("data: ").nth(1).unwrap().trim()).unwrap();
    assert_eq!(data["schema_version"], SCHEMA_VERSION);
    assert_eq!(data["data"]["desk"], "desk-1");
    assert_eq!(data["data"]["target"], 10.0);

    let (_, b) = rig.get("/api/comfort/desk-1").await;
    assert_eq!(b["data"]["occupied"], true);
    assert!(!b["data"]["events"].as_array().unwrap().is_empty());
    let (_, b) = rig.get("/api/comfort/desk-0").await;
    assert!(b["data"]["events"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn quality_needs_enough_data() {
    let mut rig = Rig::new(4);
    rig.run_for(20);
    let t0 = rig.tb.now().as_millis() - 15_000;
    let t1 = rig.tb.now().as_millis();
    let (s, b) = rig.get(&format!("/api/quality?t0={t0}&t1={t1}")).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{b}");
    assert_eq!(b["error"]["code"], "insufficient_data");
    let (s, _) = rig.get(&format!("/api/quality?t0={t1}&t1={t0}")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn fota_images_round_trip() {
    let rig = Rig::new(1);
    let img = makesense::fota::build_image(&[7u8; 3000], "2.0.0").unwrap().to_bytes();
    let req = Request::post("/api/fota/images")
        .header("authorization", format!("Bearer {TOKEN}"))
        .body(Body::from(img))
        .unwrap();
    let (s, b) = send(&rig.app, req).await;
    assert_eq!(s, StatusCode::OK, "{b}");
    assert_eq!(b["data"]["version"], "2.0.0");
    let (_, b) = rig.get("/api/fota/images").await;
    assert_eq!(b["data"], json!(["2.0.0"]));

    let req = Request::post("/api/fota/images")
        .header("authorization", format!("Bearer {TOKEN}"))
        .body(Body::from(vec![1u8, 2, 3]))
        .unwrap();
    assert_eq!(send(&rig.app, req).await.0, StatusCode::BAD_REQUEST);
    let (s, _) = rig.post("/api/fota", json!({"version": "9.9.9"})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn cors_preflight_allows_configured_origin() {
    let rig = Rig::new(1);
    let req = Request::builder()
        .method("OPTIONS")
        .uri("/api/clients")
        .header("origin", "http://localhost:3000")
        .header("access-control-request-method", "GET")
        .header("access-control-request-headers", "authorization")
        .body(Body::empty())
        .unwrap();
    let resp = rig.app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "http://localhost:3000");
}
