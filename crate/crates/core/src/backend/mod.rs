//! The collection backend as one sans-IO node: secure sessions, the LWM2M
//! server, the broker pipeline with supervised workers, storage, analytics
//! and firmware distribution.

pub mod stream;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use stream::{StreamFilter, StreamHub, StreamItem, Subscription, DEFAULT_SUBSCRIBER_BUFFER};

use crate::analytics::{
    ComfortActions, ComfortConfig, ComfortEngine, ComfortError, ComfortEvent, ComfortPreference,
    NotificationSink, PresenceEstimate, PresenceTracker,
};
use crate::broker::{Broker, BrokerMetrics, Exchange, DEFAULT_CAPACITY, DEFAULT_VISIBILITY};
use crate::clock::Timestamp;
use crate::coap::exchange::ExchangeEvent;
use crate::coap::{Code, CoapMessage, Messenger, RetransmitParams};
use crate::collector::blacklist::{Blacklist, BlacklistEntry};
use crate::collector::pseudonym::{split_endpoint, PseudonymTable};
use crate::collector::supervisor::{RestartPolicy, Supervisor, WorkerHealth, WorkerStatus};
use crate::collector::{Collector, CollectorConfig, CollectorError, DeadLetter};
use crate::datastore::diary::{DiaryError, DiaryStore};
use crate::datastore::live::{LiveWindow, DEFAULT_LIVE_CAPACITY};
use crate::datastore::{HistoricalStore, Query, QueryResult, StoreError};
use crate::eggsim::device::OBJ_BUZZER;
use crate::fota::orchestrator::{FotaOps, Orchestrator, TargetProgress};
use crate::fota::{serve_chunk, FotaError, ImageStore, URI_PREFIX};
use crate::lwm2m::registry::{DeregReason, Registration};
use crate::lwm2m::server::{Lwm2mServer, OpId, OpKind, OpOutcome, ServerEvent};
use crate::lwm2m::{
    Lwm2mError, LwPath, DEVICE_CURRENT_TIME, OBJ_DEVICE, OBJ_WRISTBAND, RES_ON_OFF,
};
use crate::psk::{self, Datagram, KeyTable, SecureSession};
use crate::reading::SensorReading;
use crate::sim::Node;

pub const Q_INGEST: &str = "collector.ingest";
pub const Q_CONTROL: &str = "collector.control";
pub const Q_STORAGE: &str = "storage";
pub const Q_LIVE: &str = "live-view";
pub const Q_ANALYTICS: &str = "analytics";
const PUMP_BATCH: usize = 256;
const PRESENCE_LOG_CAP: usize = 10_000;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(String),
    #[error(transparent)]
    Lwm2m(#[from] Lwm2mError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Fota(#[from] FotaError),
    #[error(transparent)]
    Comfort(#[from] ComfortError),
    #[error(transparent)]
    Diary(#[from] DiaryError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug)]
pub struct BackendConfig {
    pub addr: SocketAddr,
    pub data_dir: PathBuf,
    pub keys: KeyTable,
    pub collector: CollectorConfig,
    pub pseudonym_seed: u64,
    pub live_capacity: usize,
    pub queue_capacity: usize,
    pub comfort: ComfortConfig,
    pub restart: RestartPolicy,
    pub retransmit: RetransmitParams,
    /// Session ids and handshake randoms.
    pub seed: u64,
    /// Minimum spacing of clock corrections per device.
    pub resync_interval: Duration,
}

impl BackendConfig {
    pub fn new(addr: SocketAddr, data_dir: impl Into<PathBuf>, keys: KeyTable) -> Self {
        BackendConfig {
            addr,
            data_dir: data_dir.into(),
            keys,
            collector: CollectorConfig::default(),
            pseudonym_seed: 0x6d61_6b65,
            live_capacity: DEFAULT_LIVE_CAPACITY,
            queue_capacity: DEFAULT_CAPACITY,
            comfort: ComfortConfig::default(),
            restart: RestartPolicy::default(),
            retransmit: RetransmitParams::default(),
            seed: 1,
            resync_interval: Duration::from_secs(60),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum WorkerKind {
    Ingest,
    Control,
    Storage,
    Live,
    Analytics,
}

#[derive(Debug)]
struct Worker {
    kind: WorkerKind,
    queue: &'static str,
    slot: usize,
    consumer: Option<u64>,
    crash_next: bool,
}

#[derive(Debug, Serialize, Deserialize)]
enum ControlMsg {
    Registered(Registration),
    Deregistered(Registration, DeregReason),
}

#[derive(Debug)]
struct PeerSession {
    psk_id: String,
    session: SecureSession,
}

/// Outcome of a management operation, for API polling.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpRecord {
    pub op: OpId,
    pub endpoint: String,
    pub kind: String,
    pub done: bool,
    pub success: bool,
    pub code: Option<String>,
    pub payload: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeviceInfo {
    pub endpoint: String,
    pub site: String,
    pub fw_version: Option<String>,
    pub lifetime_s: u32,
    pub registered_at: Timestamp,
    pub last_update: Timestamp,
    pub objects: Vec<String>,
    pub observed: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PresenceChange {
    pub site: String,
    pub band: u16,
    pub nearest_egg: Option<String>,
    pub at: Timestamp,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BackendCounters {
    pub datagrams_in: u64,
    pub datagrams_out: u64,
    pub handshakes_ok: u64,
    pub handshakes_failed: u64,
    pub records_rejected: u64,
    pub notifications: u64,
    pub registrations: u64,
    pub deregistrations: u64,
    pub time_syncs: u64,
    pub observe_retries: u64,
    pub comfort_events: u64,
    pub buzzer_actions: u64,
    pub forbidden_registrations: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BackendMetrics {
    pub counters: BackendCounters,
    pub readings_published: u64,
    pub dead_lettered: u64,
    /// Reading deliveries taken by the storage worker, redeliveries included.
    pub storage_received: u64,
    pub stored: u64,
    pub deduped: u64,
    pub live_pushed: u64,
    pub registered: usize,
    pub worker_restarts: u64,
    pub broker: BrokerMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HealthReport {
    pub status: &'static str,
    pub registered: usize,
    pub workers: Vec<WorkerHealth>,
}

#[derive(Debug)]
struct ObserveRetry {
    at: Timestamp,
    endpoint: String,
    path: LwPath,
}

/// Adapts the server + messenger to what the orchestrator needs.
struct Ops<'a> {
    server: &'a mut Lwm2mServer,
    messenger: &'a mut Messenger,
    now: Timestamp,
}

impl FotaOps for Ops<'_> {
    fn write(&mut self, endpoint: &str, path: LwPath, value: &str) -> Option<OpId> {
        self.server
            .write(endpoint, path, value, self.now, self.messenger)
            .ok()
    }

    fn read(&mut self, endpoint: &str, path: LwPath) -> Option<OpId> {
        self.server.read(endpoint, path, self.now, self.messenger).ok()
    }

    fn execute(&mut self, endpoint: &str, path: LwPath) -> Option<OpId> {
        self.server
            .execute(endpoint, path, self.now, self.messenger)
            .ok()
    }
}

fn encode_ingest(endpoint: &str, server_time: Timestamp, payload: &[u8]) -> Vec<u8> {
    let mut v = Vec::with_capacity(10 + endpoint.len() + payload.len());
    v.extend_from_slice(&(endpoint.len() as u16).to_be_bytes());
    v.extend_from_slice(endpoint.as_bytes());
    v.extend_from_slice(&server_time.0.to_be_bytes());
    v.extend_from_slice(payload);
    v
}

fn decode_ingest(b: &[u8]) -> Option<(&str, Timestamp, &[u8])> {
    let n = u16::from_be_bytes(b.get(..2)?.try_into().ok()?) as usize;
    let ep = std::str::from_utf8(b.get(2..2 + n)?).ok()?;
    let t = i64::from_be_bytes(b.get(2 + n..10 + n)?.try_into().ok()?);
    Some((ep, Timestamp(t), &b[10 + n..]))
}

/// Desk number for office eggs named `egg-<n>`.
pub fn desk_of(device: &str) -> Option<String> {
    let n: usize = device.strip_prefix("egg-")?.parse().ok()?;
    Some(format!("desk-{n}"))
}

pub struct Backend {
    pub config: BackendConfig,
    rng: ChaCha8Rng,
    sessions: HashMap<SocketAddr, PeerSession>,
    messenger: Messenger,
    server: Lwm2mServer,
    broker: Broker,
    collector: Collector,
    supervisor: Supervisor,
    workers: Vec<Worker>,
    store: HistoricalStore,
    live: LiveWindow,
    diary: DiaryStore,
    images: ImageStore,
    orchestrator: Orchestrator,
    comfort: ComfortEngine,
    sink: NotificationSink,
    presence: HashMap<String, PresenceTracker<f64>>,
    presence_log: VecDeque<PresenceChange>,
    hub: StreamHub,
    ops: BTreeMap<OpId, OpRecord>,
    observe_attempts: HashMap<(String, LwPath), u32>,
    retries: Vec<ObserveRetry>,
    last_sync: HashMap<String, Timestamp>,
    raw_by_pseudo: HashMap<String, String>,
    scheduled_crashes: Vec<(Timestamp, String)>,
    outbox: VecDeque<(SocketAddr, Vec<u8>)>,
    counters: BackendCounters,
    live_pushed: u64,
    storage_received: u64,
}

impl Backend {
    pub fn open(config: BackendConfig) -> Result<Self, BackendError> {
        let dir = &config.data_dir;
        std::fs::create_dir_all(dir)?;
        let table = PseudonymTable::open(dir.join("pseudonyms.tsv"), config.pseudonym_seed)?;
        let collector = Collector::new(
            config.collector.clone(),
            table,
            Blacklist::open(dir.join("blacklist.txt"))?,
            DeadLetter::open(dir.join("dead_letter.jsonl"))?,
        );
        let store = HistoricalStore::open(dir.join("store"), Some(dir.join("mirror")))?;
        let mut broker = Broker::new(DEFAULT_VISIBILITY);
        for q in [Q_INGEST, Q_CONTROL, Q_STORAGE, Q_LIVE, Q_ANALYTICS] {
            broker.declare_queue(q, config.queue_capacity);
        }
        for q in [Q_STORAGE, Q_LIVE, Q_ANALYTICS] {
            broker.bind(Exchange::LiveData, "#", q).expect("declared");
        }
        broker.bind(Exchange::Control, "#", Q_CONTROL).expect("declared");
        let mut supervisor = Supervisor::new(config.restart);
        let mut workers = Vec::new();
        for (name, kind, queue) in [
            ("collector-ingest", WorkerKind::Ingest, Q_INGEST),
            ("collector-control", WorkerKind::Control, Q_CONTROL),
            ("storage", WorkerKind::Storage, Q_STORAGE),
            ("live-view", WorkerKind::Live, Q_LIVE),
            ("analytics", WorkerKind::Analytics, Q_ANALYTICS),
        ] {
            let slot = supervisor.add(name);
            let consumer = Some(broker.subscribe(queue).expect("declared"));
            workers.push(Worker {
                kind,
                queue,
                slot,
                consumer,
                crash_next: false,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Backend {
            messenger: Messenger::new(config.retransmit, rng.gen()),
            rng,
            sessions: HashMap::new(),
            server: Lwm2mServer::new(),
            broker,
            collector,
            supervisor,
            workers,
            store,
            live: LiveWindow::new(config.live_capacity),
            diary: DiaryStore::open(dir.join("diary"))?,
            images: ImageStore::open(dir.join("images"))?,
            orchestrator: Orchestrator::new(),
            comfort: ComfortEngine::new(config.comfort.clone())?,
            sink: NotificationSink::open(dir.join("notifications.jsonl"))?,
            presence: HashMap::new(),
            presence_log: VecDeque::new(),
            hub: StreamHub::default(),
            ops: BTreeMap::new(),
            observe_attempts: HashMap::new(),
            retries: Vec::new(),
            last_sync: HashMap::new(),
            raw_by_pseudo: HashMap::new(),
            scheduled_crashes: Vec::new(),
            outbox: VecDeque::new(),
            counters: BackendCounters::default(),
            live_pushed: 0,
            storage_received: 0,
            config,
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.config.data_dir
    }

    pub fn store(&self) -> &HistoricalStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut HistoricalStore {
        &mut self.store
    }

    pub fn live(&self) -> &LiveWindow {
        &self.live
    }

    pub fn diary(&self) -> &DiaryStore {
        &self.diary
    }

    pub fn images(&self) -> &ImageStore {
        &self.images
    }

    pub fn collector(&self) -> &Collector {
        &self.collector
    }

    pub fn comfort(&self) -> &ComfortEngine {
        &self.comfort
    }

    pub fn sink(&self) -> &NotificationSink {
        &self.sink
    }

    pub fn server(&self) -> &Lwm2mServer {
        &self.server
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn supervisor(&self) -> &Supervisor {
        &self.supervisor
    }

    pub fn orchestrator(&self) -> &Orchestrator {
        &self.orchestrator
    }

    pub fn subscribe(&mut self, filter: StreamFilter, capacity: usize) -> Subscription {
        self.hub.subscribe(filter, capacity)
    }

    // ---- identifiers ----

    /// Raw endpoint behind a pseudonymous one.
    pub fn raw_endpoint(&self, pseudo: &str) -> Option<&str> {
        self.raw_by_pseudo.get(pseudo).map(String::as_str)
    }

    /// Accepts a pseudonymous endpoint, or the device part of one when that
    /// is unambiguous.
    fn resolve(&self, pseudo: &str) -> Result<String, BackendError> {
        if let Some(raw) = self.raw_by_pseudo.get(pseudo) {
            return Ok(raw.clone());
        }
        let suffix = format!("-{pseudo}");
        let mut hits = self.raw_by_pseudo.iter().filter(|(p, _)| p.ends_with(&suffix));
        match (hits.next(), hits.next()) {
            (Some((_, raw)), None) => Ok(raw.clone()),
            _ => Err(BackendError::UnknownEndpoint(pseudo.into())),
        }
    }

    /// The pseudonymous endpoint an API caller meant.
    pub fn canonical_endpoint(&self, name: &str) -> Option<String> {
        let raw = self.resolve(name).ok()?;
        Some(self.pseudo_of(&raw))
    }

    fn pseudo_of(&self, raw: &str) -> String {
        self.collector
            .pseudonyms
            .lookup_endpoint(raw)
            .unwrap_or_else(|| "unknown".into())
    }

    /// Pseudonymous site token for a raw site id, issuing one if needed.
    pub fn site_token(&mut self, raw_site: &str) -> Result<String, BackendError> {
        Ok(self.collector.pseudonyms.site_token(raw_site)?)
    }

    // ---- queries ----

    pub fn devices(&self) -> Vec<DeviceInfo> {
        let mut out: Vec<DeviceInfo> = self
            .server
            .registry
            .list()
            .into_iter()
            .map(|r| {
                let pseudo = self.pseudo_of(&r.endpoint);
                let (site, _) = pseudo.split_once('-').unwrap_or((&pseudo, ""));
                DeviceInfo {
                    site: site.to_string(),
                    fw_version: r.firmware_version().map(String::from),
                    lifetime_s: r.lifetime_s,
                    registered_at: r.registered_at,
                    last_update: r.last_update,
                    objects: r.links.iter().map(|l| l.path.to_string()).collect(),
                    observed: self
                        .server
                        .observations_of(&r.endpoint)
                        .iter()
                        .map(|p| p.to_string())
                        .collect(),
                    endpoint: pseudo,
                }
            })
            .collect();
        out.sort_by(|a, b| a.endpoint.cmp(&b.endpoint));
        out
    }

    pub fn query(&self, q: &Query) -> Result<QueryResult, BackendError> {
        Ok(self.store.query(q)?)
    }

    pub fn metrics(&self) -> BackendMetrics {
        let st = self.store.stats();
        BackendMetrics {
            counters: self.counters.clone(),
            readings_published: self.collector.stats.readings_published,
            dead_lettered: self.collector.stats.dead_lettered,
            storage_received: self.storage_received,
            stored: st.stored,
            deduped: st.deduped,
            live_pushed: self.live_pushed,
            registered: self.server.registry.len(),
            worker_restarts: self.supervisor.total_restarts(),
            broker: self.broker.metrics(),
        }
    }

    pub fn health(&self) -> HealthReport {
        let workers = self.supervisor.health();
        let status = if self.supervisor.any_gave_up() {
            "failed"
        } else if workers.iter().any(|w| w.status != WorkerStatus::Running) {
            "degraded"
        } else {
            "ok"
        };
        HealthReport {
            status,
            registered: self.server.registry.len(),
            workers,
        }
    }

    pub fn presence(&self, site: &str, band: u16, now: Timestamp) -> Option<PresenceEstimate<f64>> {
        self.presence.get(site).map(|t| t.estimate(band, now))
    }

    pub fn presence_log(&self) -> Vec<PresenceChange> {
        self.presence_log.iter().cloned().collect()
    }

    // ---- management ----

    fn track_op(&mut self, op: OpId, endpoint: &str, kind: &str) -> OpId {
        self.ops.insert(
            op,
            OpRecord {
                op,
                endpoint: endpoint.to_string(),
                kind: kind.to_string(),
                done: false,
                success: false,
                code: None,
                payload: None,
            },
        );
        op
    }

    pub fn read(&mut self, endpoint: &str, path: LwPath, now: Timestamp) -> Result<OpId, BackendError> {
        let raw = self.resolve(endpoint)?;
        let op = self.server.read(&raw, path, now, &mut self.messenger)?;
        self.after(now);
        Ok(self.track_op(op, endpoint, "read"))
    }

    pub fn write(&mut self, endpoint: &str, path: LwPath, value: &str, now: Timestamp) -> Result<OpId, BackendError> {
        let raw = self.resolve(endpoint)?;
        let op = self.server.write(&raw, path, value, now, &mut self.messenger)?;
        self.after(now);
        Ok(self.track_op(op, endpoint, "write"))
    }

    pub fn execute(&mut self, endpoint: &str, path: LwPath, now: Timestamp) -> Result<OpId, BackendError> {
        let raw = self.resolve(endpoint)?;
        let op = self.server.execute(&raw, path, now, &mut self.messenger)?;
        self.after(now);
        Ok(self.track_op(op, endpoint, "execute"))
    }

    pub fn observe(&mut self, endpoint: &str, path: LwPath, period: Duration, now: Timestamp) -> Result<OpId, BackendError> {
        let raw = self.resolve(endpoint)?;
        let op = self.server.observe(&raw, path, period, now, &mut self.messenger)?;
        self.after(now);
        Ok(self.track_op(op, endpoint, "observe"))
    }

    pub fn op_result(&self, op: OpId) -> Option<&OpRecord> {
        self.ops.get(&op)
    }

    /// Blocks an endpoint (or one path of it) and cancels matching
    /// observations.
    pub fn blacklist_add(&mut self, endpoint: &str, path: Option<LwPath>, now: Timestamp) -> Result<bool, BackendError> {
        let raw = self.resolve(endpoint)?;
        let entry = BlacklistEntry {
            endpoint: raw.clone(),
            path,
        };
        let added = self.collector.blacklist.add(entry.clone())?;
        for p in self.server.observations_of(&raw) {
            if entry.covers(&raw, p) {
                let _ = self.server.cancel_observe(&raw, p, now, &mut self.messenger);
            }
        }
        self.retries.retain(|r| !entry.covers(&r.endpoint, r.path));
        self.after(now);
        Ok(added)
    }

    pub fn blacklist_remove(&mut self, endpoint: &str, path: Option<LwPath>, now: Timestamp) -> Result<bool, BackendError> {
        let raw = self.resolve(endpoint)?;
        let removed = self.collector.blacklist.remove(&BlacklistEntry {
            endpoint: raw.clone(),
            path,
        })?;
        if removed {
            if let Some(reg) = self.server.registry.by_endpoint(&raw).cloned() {
                self.start_observations(&reg, now);
            }
            self.after(now);
        }
        Ok(removed)
    }

    pub fn blacklist(&self) -> Vec<(String, Option<LwPath>)> {
        self.collector
            .blacklist
            .entries()
            .into_iter()
            .map(|e| (self.pseudo_of(&e.endpoint), e.path))
            .collect()
    }

    /// Stores a firmware image; returns its version.
    pub fn add_image(&mut self, bytes: &[u8]) -> Result<String, BackendError> {
        Ok(self.images.put(bytes)?)
    }

    /// Starts a push of `version` to the given endpoints, or to every
    /// registered device.
    pub fn fota_push(&mut self, version: &str, endpoints: Option<&[String]>, now: Timestamp) -> Result<Vec<String>, BackendError> {
        if !self.images.contains(version) {
            return Err(FotaError::UnknownVersion(version.into()).into());
        }
        let raws: Vec<String> = match endpoints {
            Some(eps) => eps.iter().map(|e| self.resolve(e)).collect::<Result<_, _>>()?,
            None => self
                .server
                .registry
                .list()
                .iter()
                .map(|r| r.endpoint.clone())
                .collect(),
        };
        let targets = raws
            .iter()
            .map(|r| (r.clone(), self.server.registry.by_endpoint(r).cloned()))
            .collect();
        let mut ops = Ops {
            server: &mut self.server,
            messenger: &mut self.messenger,
            now,
        };
        self.orchestrator.push(version, targets, now, &mut ops);
        self.after(now);
        Ok(raws.iter().map(|r| self.pseudo_of(r)).collect())
    }

    pub fn fota_progress(&self) -> Vec<TargetProgress> {
        self.orchestrator
            .progress()
            .into_iter()
            .map(|mut p| {
                p.endpoint = self.pseudo_of(&p.endpoint);
                p
            })
            .collect()
    }

    pub fn set_preference(&mut self, pref: ComfortPreference) -> Result<(), BackendError> {
        Ok(self.comfort.set_preference(pref)?)
    }

    pub fn set_monitoring(&mut self, desk: &str, on: bool) -> Result<(), BackendError> {
        Ok(self.comfort.set_monitoring(desk, on)?)
    }

    pub fn comfort_events(&self) -> &[ComfortEvent] {
        self.comfort.events()
    }

    /// Imports a diary CSV for a raw site id; names are pseudonymized.
    pub fn import_diary(&mut self, raw_site: &str, csv_text: &str) -> Result<usize, BackendError> {
        let site = self.collector.pseudonyms.site_token(raw_site)?;
        let names = &mut self.collector.pseudonyms;
        Ok(self.diary.import(&site, csv_text, |who| names.person_token(who))?)
    }

    /// The next message a worker processes will be handled but not
    /// acknowledged, and the worker then dies.
    pub fn inject_worker_crash(&mut self, worker: &str) -> bool {
        let Some(slot) = self.supervisor.index_of(worker) else {
            return false;
        };
        match self.workers.iter_mut().find(|w| w.slot == slot) {
            Some(w) => {
                w.crash_next = true;
                true
            }
            None => false,
        }
    }

    pub fn schedule_worker_crash(&mut self, worker: &str, at: Timestamp) {
        self.scheduled_crashes.push((at, worker.to_string()));
    }

    /// Flushes storage to disk.
    pub fn sync(&mut self) -> Result<(), BackendError> {
        Ok(self.store.sync()?)
    }

    // ---- internals ----

    fn start_observations(&mut self, reg: &Registration, now: Timestamp) {
        for (path, period) in self.collector.observe_plan(reg) {
            if self.server.is_observed(&reg.endpoint, path) {
                continue;
            }
            if let Err(e) = self
                .server
                .observe(&reg.endpoint, path, period, now, &mut self.messenger)
            {
                log::warn!("observe {path}: {e}");
            }
        }
    }

    fn time_sync(&mut self, raw: &str, now: Timestamp) {
        let secs = format!("{:.3}", now.as_secs_f64());
        let path = LwPath::resource(OBJ_DEVICE, 0, DEVICE_CURRENT_TIME);
        if self
            .server
            .write(raw, path, &secs, now, &mut self.messenger)
            .is_ok()
        {
            self.counters.time_syncs += 1;
            self.last_sync.insert(raw.to_string(), now);
        }
    }

    fn on_control(&mut self, msg: ControlMsg, now: Timestamp) {
        match msg {
            ControlMsg::Registered(reg) => {
                match self.collector.pseudonyms.ids(&reg.endpoint) {
                    Ok(ids) => {
                        self.raw_by_pseudo.insert(ids.endpoint.clone(), reg.endpoint.clone());
                        let (site, device) =
                            split_endpoint(&reg.endpoint, self.collector.pseudonyms.default_site());
                        if site == self.collector.pseudonyms.default_site() {
                            if let Some(desk) = desk_of(device) {
                                self.comfort.assign_desk(&desk, &ids.endpoint);
                            }
                        }
                    }
                    Err(e) => log::error!("pseudonym table: {e}"),
                }
                self.observe_attempts.retain(|(ep, _), _| *ep != reg.endpoint);
                self.retries.retain(|r| r.endpoint != reg.endpoint);
                self.start_observations(&reg, now);
                self.time_sync(&reg.endpoint, now);
                self.orchestrator.on_registration(&reg, now);
            }
            ControlMsg::Deregistered(reg, _) => {
                self.last_sync.remove(&reg.endpoint);
                self.retries.retain(|r| r.endpoint != reg.endpoint);
                self.observe_attempts.retain(|(ep, _), _| *ep != reg.endpoint);
            }
        }
    }

    fn publish_control(&mut self, msg: ControlMsg, now: Timestamp) {
        let key = match &msg {
            ControlMsg::Registered(_) => "registration.created",
            ControlMsg::Deregistered(..) => "registration.deleted",
        };
        let payload = serde_json::to_vec(&msg).expect("serializable");
        self.broker.publish(Exchange::Control, key, payload, now);
    }

    fn on_server_event(&mut self, ev: ServerEvent, now: Timestamp) {
        match ev {
            ServerEvent::Registered {
                registration,
                replaced,
            } => {
                self.counters.registrations += 1;
                if let Some(old) = replaced {
                    self.counters.deregistrations += 1;
                    self.publish_control(ControlMsg::Deregistered(old, DeregReason::Replaced), now);
                }
                self.publish_control(ControlMsg::Registered(registration), now);
            }
            ServerEvent::Updated { .. } => {}
            ServerEvent::Deregistered {
                registration,
                reason,
            } => {
                self.counters.deregistrations += 1;
                self.publish_control(ControlMsg::Deregistered(registration, reason), now);
            }
            ServerEvent::Notification {
                endpoint, payload, ..
            } => {
                self.counters.notifications += 1;
                let env = encode_ingest(&endpoint, now, &payload);
                let _ = self.broker.enqueue(Q_INGEST, "notification", env, now);
            }
            ServerEvent::OpCompleted {
                op,
                endpoint,
                kind,
                outcome,
            } => {
                if self.orchestrator.owns(op) {
                    let mut ops = Ops {
                        server: &mut self.server,
                        messenger: &mut self.messenger,
                        now,
                    };
                    self.orchestrator.on_op_completed(op, &outcome, now, &mut ops);
                    return;
                }
                if let OpKind::Observe(path) = kind {
                    if !outcome.is_success() && self.server.registry.by_endpoint(&endpoint).is_some() {
                        self.schedule_observe_retry(endpoint, path, now);
                    }
                }
                if let Some(rec) = self.ops.get_mut(&op) {
                    rec.done = true;
                    rec.success = outcome.is_success();
                    match &outcome {
                        OpOutcome::Response(m) => {
                            rec.code = Some(m.code.to_string());
                            rec.payload = Some(String::from_utf8_lossy(&m.payload).into_owned());
                        }
                        OpOutcome::Timeout => rec.code = Some("timeout".into()),
                        OpOutcome::Reset => rec.code = Some("reset".into()),
                    }
                }
            }
        }
    }

    fn schedule_observe_retry(&mut self, endpoint: String, path: LwPath, now: Timestamp) {
        let n = self.observe_attempts.entry((endpoint.clone(), path)).or_default();
        *n += 1;
        if *n <= self.config.collector.observe_retries {
            self.counters.observe_retries += 1;
            let backoff = Duration::from_secs(1 << (*n).min(6));
            self.retries.push(ObserveRetry {
                at: now + backoff,
                endpoint,
                path,
            });
        }
    }

    fn rd_forbidden(&self, peer: SocketAddr, msg: &CoapMessage) -> bool {
        if msg.code != Code::POST || msg.path() != "/rd" {
            return false;
        }
        let id = self.sessions.get(&peer).map(|s| s.psk_id.as_str());
        msg.query("ep").as_deref() != id
    }

    fn drain_messenger(&mut self, now: Timestamp) {
        while let Some(ev) = self.messenger.poll_event() {
            match ev {
                ExchangeEvent::Request { peer, msg } => {
                    if msg.path().starts_with(URI_PREFIX) {
                        let resp = serve_chunk(&self.images, &msg);
                        let _ = self.messenger.respond(peer, &msg, resp);
                    } else if self.rd_forbidden(peer, &msg) {
                        self.counters.forbidden_registrations += 1;
                        let resp = CoapMessage::response_to(&msg, Code::FORBIDDEN);
                        let _ = self.messenger.respond(peer, &msg, resp);
                    } else {
                        match self.server.handle_request(peer, &msg, now, &mut self.messenger) {
                            Some(evs) => evs.into_iter().for_each(|e| self.on_server_event(e, now)),
                            None => {
                                let resp = CoapMessage::response_to(&msg, Code::NOT_FOUND);
                                let _ = self.messenger.respond(peer, &msg, resp);
                            }
                        }
                    }
                }
                ExchangeEvent::Response { peer, token, msg } => {
                    if let Some(e) = self.server.handle_response(peer, &token, msg) {
                        self.on_server_event(e, now);
                    }
                }
                ExchangeEvent::Timeout { peer, token, .. } => {
                    if let Some(e) = self.server.handle_failure(peer, &token, OpOutcome::Timeout) {
                        self.on_server_event(e, now);
                    }
                }
                ExchangeEvent::Reset { peer, token } => {
                    if let Some(e) = self.server.handle_failure(peer, &token, OpOutcome::Reset) {
                        self.on_server_event(e, now);
                    }
                }
            }
        }
    }

    fn process(&mut self, kind: WorkerKind, payload: &[u8], now: Timestamp) -> Result<(), String> {
        match kind {
            WorkerKind::Ingest => {
                let (raw, server_time, body) =
                    decode_ingest(payload).ok_or("corrupt ingest envelope")?;
                let raw = raw.to_string();
                match self.collector.on_notification(&raw, body, server_time) {
                    Ok(readings) => {
                        for r in &readings {
                            let key = format!("{}.{}.{}", r.site, r.endpoint, r.object_id);
                            self.broker.publish(Exchange::LiveData, &key, r.encode(), now);
                        }
                        if let Some(r) = readings.first() {
                            let recent = self
                                .last_sync
                                .get(&raw)
                                .is_some_and(|t| now.saturating_sub(*t) < self.config.resync_interval);
                            if !recent && self.collector.needs_time_sync(r.device_time, server_time) {
                                self.time_sync(&raw, now);
                            }
                        }
                        Ok(())
                    }
                    Err(CollectorError::ParseError(_)) => Ok(()),
                    Err(e) => Err(e.to_string()),
                }
            }
            WorkerKind::Control => {
                let msg: ControlMsg = serde_json::from_slice(payload).map_err(|e| e.to_string())?;
                self.on_control(msg, now);
                Ok(())
            }
            WorkerKind::Storage => {
                self.storage_received += 1;
                let r = SensorReading::decode(payload).map_err(|e| e.to_string())?;
                self.store.append(&r).map_err(|e| e.to_string())?;
                Ok(())
            }
            WorkerKind::Live => {
                let r = SensorReading::decode(payload).map_err(|e| e.to_string())?;
                self.hub.publish(StreamItem::Reading(r.clone()));
                self.live.push(r);
                self.live_pushed += 1;
                Ok(())
            }
            WorkerKind::Analytics => {
                let r = SensorReading::decode(payload).map_err(|e| e.to_string())?;
                if r.object_id == OBJ_WRISTBAND {
                    self.on_presence(&r);
                }
                for ev in self.comfort.on_reading(&r) {
                    self.counters.comfort_events += 1;
                    self.comfort_actions(&ev, now);
                }
                Ok(())
            }
        }
    }

    fn on_presence(&mut self, r: &SensorReading) {
        let tracker = self.presence.entry(r.site.clone()).or_default();
        let before = tracker.estimate(r.instance, r.device_time).nearest_egg;
        let after = tracker.update_reading(r).nearest_egg;
        if before != after {
            if self.presence_log.len() >= PRESENCE_LOG_CAP {
                self.presence_log.pop_front();
            }
            self.presence_log.push_back(PresenceChange {
                site: r.site.clone(),
                band: r.instance,
                nearest_egg: after,
                at: r.device_time,
            });
        }
    }

    fn comfort_actions(&mut self, ev: &ComfortEvent, now: Timestamp) {
        let mut actions = ComfortActions::default();
        if let Some(raw) = self.raw_by_pseudo.get(&ev.endpoint).cloned() {
            let path = LwPath::resource(OBJ_BUZZER, 0, RES_ON_OFF);
            if self.server.execute(&raw, path, now, &mut self.messenger).is_ok() {
                actions.buzzer_executed = true;
                self.counters.buzzer_actions += 1;
            }
        }
        match self.sink.append(ev) {
            Ok(()) => actions.email_record = true,
            Err(e) => log::error!("notification sink: {e}"),
        }
        self.comfort
            .record_actions(ev.fired_at, &ev.desk, ev.variable, actions);
        let mut ev = ev.clone();
        ev.actions = actions;
        self.hub.publish(StreamItem::Comfort(ev));
    }

    fn crash_worker(&mut self, w: usize, cause: &str, now: Timestamp) {
        let slot = self.workers[w].slot;
        if let Some(c) = self.workers[w].consumer.take() {
            self.broker.drop_consumer(c);
        }
        self.workers[w].crash_next = false;
        let status = self.supervisor.crashed(slot, cause, now);
        log::warn!("worker {} crashed ({cause}): {status:?}", self.supervisor.name(slot));
    }

    fn pump(&mut self, now: Timestamp) {
        loop {
            let mut progressed = false;
            for w in 0..self.workers.len() {
                let Some(consumer) = self.workers[w].consumer else { continue };
                let kind = self.workers[w].kind;
                for _ in 0..PUMP_BATCH {
                    let Ok(Some(d)) = self.broker.fetch(consumer, now) else { break };
                    progressed = true;
                    let result = self.process(kind, &d.message.payload, now);
                    if self.workers[w].crash_next {
                        self.crash_worker(w, "injected fault", now);
                        break;
                    }
                    match result {
                        Ok(()) => {
                            let _ = self.broker.ack(consumer, d.tag);
                        }
                        Err(e) => {
                            self.crash_worker(w, &e, now);
                            break;
                        }
                    }
                }
            }
            if !progressed {
                break;
            }
        }
    }

    fn restart_workers(&mut self, now: Timestamp) {
        for slot in self.supervisor.due_restarts(now) {
            if let Some(w) = self.workers.iter_mut().find(|w| w.slot == slot) {
                w.consumer = self.broker.subscribe(w.queue).ok();
            }
        }
    }

    fn flush(&mut self) {
        while let Some((peer, bytes)) = self.messenger.poll_transmit() {
            let Some(p) = self.sessions.get_mut(&peer) else { continue };
            match p.session.seal(&bytes) {
                Ok(rec) => self.outbox.push_back((peer, psk::frame_record(&rec))),
                Err(e) => log::warn!("seal for {peer}: {e}"),
            }
        }
    }

    /// Drains events, runs workers and seals outgoing traffic.
    fn after(&mut self, now: Timestamp) {
        for _ in 0..8 {
            self.drain_messenger(now);
            self.pump(now);
            if !self.messenger.has_event() {
                break;
            }
        }
        self.flush();
    }

    fn on_hello(&mut self, peer: SocketAddr, body: &[u8]) {
        let mut random = [0u8; psk::RANDOM_LEN];
        self.rng.fill(&mut random[..]);
        let mut sid = [0u8; psk::SESSION_ID_LEN];
        self.rng.fill(&mut sid[..]);
        match psk::server_accept(&self.config.keys, body, random, sid) {
            Ok(acc) => {
                self.counters.handshakes_ok += 1;
                self.messenger.forget_peer(peer);
                self.sessions.insert(
                    peer,
                    PeerSession {
                        psk_id: acc.psk_id,
                        session: acc.session,
                    },
                );
                self.outbox.push_back((peer, acc.server_hello));
            }
            Err((e, alert)) => {
                self.counters.handshakes_failed += 1;
                log::warn!("handshake from {peer}: {e}");
                if let Some(a) = alert {
                    self.outbox.push_back((peer, a));
                }
            }
        }
    }
}

impl Node for Backend {
    fn addr(&self) -> SocketAddr {
        self.config.addr
    }

    fn handle_datagram(&mut self, from: SocketAddr, bytes: &[u8], now: Timestamp) {
        self.counters.datagrams_in += 1;
        match psk::classify(bytes) {
            Ok(Datagram::ClientHello(body)) => self.on_hello(from, body),
            Ok(Datagram::Record(body)) => match self.sessions.get_mut(&from) {
                Some(p) => match p.session.open(body) {
                    Ok(pt) => self.messenger.handle_datagram(from, &pt, now),
                    Err(e) => {
                        self.counters.records_rejected += 1;
                        log::debug!("record from {from}: {e}");
                    }
                },
                None => {
                    self.counters.records_rejected += 1;
                    self.outbox
                        .push_back((from, psk::frame_alert(psk::ALERT_AUTH_FAILURE)));
                }
            },
            _ => self.counters.records_rejected += 1,
        }
        self.after(now);
    }

    fn handle_timeout(&mut self, now: Timestamp) {
        self.messenger.handle_timeout(now);
        for ev in self.server.expire(now) {
            self.on_server_event(ev, now);
        }
        self.broker.handle_timeout(now);
        self.restart_workers(now);
        let mut ops = Ops {
            server: &mut self.server,
            messenger: &mut self.messenger,
            now,
        };
        self.orchestrator.handle_timeout(now, &mut ops);
        let (due, rest): (Vec<_>, Vec<_>) = self.retries.drain(..).partition(|r| r.at <= now);
        self.retries = rest;
        for r in due {
            if let Some(reg) = self.server.registry.by_endpoint(&r.endpoint) {
                let blocked = self.collector.blacklist.is_blocked(&reg.endpoint, r.path);
                if !blocked && !self.server.is_observed(&r.endpoint, r.path) {
                    let period = self.config.collector.period_for(r.path.object);
                    let _ = self
                        .server
                        .observe(&r.endpoint, r.path, period, now, &mut self.messenger);
                }
            }
        }
        let (fire, keep): (Vec<_>, Vec<_>) =
            self.scheduled_crashes.drain(..).partition(|(t, _)| *t <= now);
        self.scheduled_crashes = keep;
        for (_, w) in fire {
            self.inject_worker_crash(&w);
        }
        self.after(now);
    }

    fn poll_timeout(&self) -> Option<Timestamp> {
        [
            self.messenger.poll_timeout(),
            self.server.next_expiry(),
            self.broker.poll_timeout(),
            self.supervisor.poll_timeout(),
            self.orchestrator.poll_timeout(),
            self.retries.iter().map(|r| r.at).min(),
            self.scheduled_crashes.iter().map(|c| c.0).min(),
        ]
        .into_iter()
        .flatten()
        .min()
    }

    fn poll_transmit(&mut self) -> Option<(SocketAddr, Vec<u8>)> {
        let out = self.outbox.pop_front();
        if out.is_some() {
            self.counters.datagrams_out += 1;
        }
        out
    }
}
