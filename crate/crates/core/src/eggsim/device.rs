use std::collections::{BTreeMap, VecDeque};
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::scenario::{DeviceKind, DeviceSpec, EggFaults};
use super::signal::{noise_key, Place};
use super::Environment;
use crate::clock::Timestamp;
use crate::coap::{Messenger, RetransmitParams};
use crate::coap::exchange::ExchangeEvent;
use crate::fota::FotaClient;
use crate::lwm2m::model::{ObjectModel, Operations, ResourceValue};
use crate::lwm2m::{
    unit_of, ClientEvent, ClientState, Lwm2mClient, LwPath, DEVICE_CURRENT_TIME,
    DEVICE_FW_VERSION, DEVICE_REBOOT, FW_PACKAGE_URI, FW_UPDATE, OBJ_DEVICE, OBJ_ENERGY,
    OBJ_FIRMWARE, OBJ_WRISTBAND, RES_ON_OFF, RES_SENSOR_VALUE, RES_UNIT,
};
use crate::psk::{self, ClientHandshake, Datagram, PskIdentity, SecureSession};
use crate::sim::Node;

pub const OBJ_BUZZER: u16 = 3338;
pub const OBJ_LIGHT_CONTROL: u16 = 3311;
const REBOOT_DELAY: Duration = Duration::from_secs(1);
const HANDSHAKE_RETRY: Duration = Duration::from_secs(5);

#[derive(Clone, Debug)]
pub struct DeviceConfig {
    pub addr: SocketAddr,
    pub server: SocketAddr,
    pub identity: PskIdentity,
    pub env: Arc<Environment>,
    pub faults: EggFaults,
    pub lifetime_s: u32,
    pub fw_version: String,
    pub clock_skew_ms: i64,
    /// First power-on.
    pub boot_at: Timestamp,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct DeviceStats {
    /// Readings sent per observed path.
    pub generated: BTreeMap<String, u64>,
    pub handshakes: u64,
    pub handshake_failures: u64,
    pub registrations: u64,
    pub crashes: u64,
    pub reboots: u64,
    pub buzzer: u64,
    pub time_syncs: u64,
    pub alerts: u64,
    pub unreachable: u64,
}

/// A simulated egg or hub.
pub struct DeviceNode {
    spec: DeviceSpec,
    cfg: DeviceConfig,
    rng: ChaCha8Rng,
    messenger: Messenger,
    client: Lwm2mClient,
    fota: FotaClient,
    fota_token: Option<Vec<u8>>,
    handshake: Option<ClientHandshake>,
    session: Option<SecureSession>,
    hs_retry_at: Option<Timestamp>,
    powered: bool,
    power_on_at: Option<Timestamp>,
    reboot_at: Option<Timestamp>,
    next_crash: usize,
    clock_offset_ms: i64,
    fw_version: String,
    outbox: VecDeque<(SocketAddr, Vec<u8>)>,
    stats: DeviceStats,
}

impl DeviceNode {
    pub fn new(spec: DeviceSpec, cfg: DeviceConfig) -> Self {
        let seed = noise_key(&[&cfg.env.seed.to_le_bytes(), b"device", spec.endpoint.as_bytes()]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let messenger = Messenger::new(RetransmitParams::default(), rng.gen());
        let client = Lwm2mClient::new(
            spec.endpoint.clone(),
            cfg.lifetime_s,
            build_model(&spec),
            cfg.server,
            cfg.fw_version.clone(),
        );
        let fw = cfg.fw_version.clone();
        let mut node = DeviceNode {
            power_on_at: Some(cfg.boot_at),
            clock_offset_ms: cfg.clock_skew_ms,
            fw_version: cfg.fw_version.clone(),
            spec,
            cfg,
            rng,
            messenger,
            client,
            fota: FotaClient::new(),
            fota_token: None,
            handshake: None,
            session: None,
            hs_retry_at: None,
            powered: false,
            reboot_at: None,
            next_crash: 0,
            outbox: VecDeque::new(),
            stats: DeviceStats::default(),
        };
        node.set_running_fw(fw);
        node
    }

    pub fn spec(&self) -> &DeviceSpec {
        &self.spec
    }

    pub fn endpoint(&self) -> &str {
        &self.spec.endpoint
    }

    pub fn stats(&self) -> &DeviceStats {
        &self.stats
    }

    pub fn fw_version(&self) -> &str {
        &self.fw_version
    }

    pub fn is_powered(&self) -> bool {
        self.powered
    }

    pub fn is_registered(&self) -> bool {
        self.session.is_some() && self.client.state() == ClientState::Registered
    }

    pub fn registration_id(&self) -> Option<&str> {
        self.client.registration_id()
    }

    pub fn fota(&self) -> &FotaClient {
        &self.fota
    }

    pub fn fota_mut(&mut self) -> &mut FotaClient {
        &mut self.fota
    }

    pub fn device_time(&self, now: Timestamp) -> Timestamp {
        Timestamp(now.0 + self.clock_offset_ms)
    }

    pub fn clock_offset_ms(&self) -> i64 {
        self.clock_offset_ms
    }

    /// Readings generated for `object`, summed over instances.
    pub fn generated(&self, object: u16) -> u64 {
        let prefix = format!("/{object}/");
        self.stats
            .generated
            .iter()
            .filter(|(p, _)| p.starts_with(&prefix))
            .map(|(_, n)| n)
            .sum()
    }

    /// Power loss now; restarts after `down_for`.
    pub fn crash(&mut self, now: Timestamp, down_for: Duration) {
        self.stats.crashes += 1;
        self.power_off();
        if let Some(v) = self.fota.crash() {
            self.set_running_fw(v);
        }
        self.power_on_at = Some(now + down_for);
    }

    fn power_off(&mut self) {
        self.powered = false;
        self.session = None;
        self.handshake = None;
        self.hs_retry_at = None;
        self.reboot_at = None;
        self.fota_token = None;
        self.client.reset();
        self.messenger = Messenger::new(RetransmitParams::default(), self.rng.gen());
    }

    fn set_running_fw(&mut self, v: String) {
        self.fw_version = v.clone();
        self.client.set_firmware_version(v.clone());
        let _ = self
            .client
            .model
            .set(LwPath::resource(OBJ_DEVICE, 0, DEVICE_FW_VERSION), ResourceValue::Str(v));
    }

    fn power_on(&mut self, now: Timestamp) {
        self.powered = true;
        self.power_on_at = None;
        self.fota.sync(&mut self.client.model);
        self.start_handshake(now);
    }

    fn start_handshake(&mut self, now: Timestamp) {
        let mut random = [0u8; psk::RANDOM_LEN];
        self.rng.fill(&mut random[..]);
        let (hs, hello) = ClientHandshake::start(self.cfg.identity.clone(), random, now);
        self.stats.handshakes += 1;
        self.handshake = Some(hs);
        self.hs_retry_at = None;
        self.outbox.push_back((self.cfg.server, hello));
    }

    /// Drops the secure session and starts over.
    fn link_lost(&mut self, now: Timestamp, delay: Duration) {
        self.session = None;
        self.handshake = None;
        self.fota_token = None;
        self.fota.on_fetch_failed();
        self.client.reset();
        self.messenger = Messenger::new(RetransmitParams::default(), self.rng.gen());
        self.hs_retry_at = Some(now + delay);
    }

    fn sample(&self, path: LwPath, now: Timestamp) -> Option<f64> {
        let env = &self.cfg.env;
        if self.cfg.faults.is_silent(path.object, env.rel_s(now)) {
            return None;
        }
        let inst = path.instance?;
        let v = match path.object {
            OBJ_WRISTBAND => env.rssi(&self.spec.site, inst, &self.spec.endpoint, self.spec.position, now)?,
            OBJ_ENERGY => env.watts(&self.spec.site, self.spec.channels.get(inst as usize)?, now)?,
            obj => env.signal.sample(
                obj,
                Place {
                    site: &self.spec.site,
                    room: &self.spec.room,
                    egg: &self.spec.endpoint,
                },
                now,
            ),
        };
        Some(v + self.cfg.faults.bias.get(&path.object).copied().unwrap_or(0.0))
    }

    fn sample_due(&mut self, now: Timestamp) {
        let device_time = self.device_time(now);
        for path in self.client.due(now) {
            match self.sample(path, now) {
                Some(v) => {
                    let _ = self.client.model.set(path, ResourceValue::Float(v));
                    match self.client.notify(path, device_time, &mut self.messenger) {
                        Ok(()) => *self.stats.generated.entry(path.to_string()).or_default() += 1,
                        Err(e) => log::warn!("{}: notify {path}: {e}", self.spec.endpoint),
                    }
                }
                None => self.client.skip(path),
            }
        }
    }

    fn on_client_event(&mut self, ev: ClientEvent, now: Timestamp) {
        match ev {
            ClientEvent::Registered { .. } => self.stats.registrations += 1,
            ClientEvent::Written { path, text }
                if path == LwPath::resource(OBJ_FIRMWARE, 0, FW_PACKAGE_URI) =>
            {
                if let Err(e) = self.fota.on_uri(&text, now) {
                    log::warn!("{}: package uri rejected: {e}", self.spec.endpoint);
                }
                self.fota.sync(&mut self.client.model);
            }
            ClientEvent::Executed { path } => {
                if path == LwPath::resource(OBJ_FIRMWARE, 0, FW_UPDATE) {
                    if self.fota.begin_update() {
                        self.reboot_at = Some(now + REBOOT_DELAY);
                    }
                    self.fota.sync(&mut self.client.model);
                } else if path == LwPath::resource(OBJ_DEVICE, 0, DEVICE_REBOOT) {
                    self.reboot_at = Some(now + REBOOT_DELAY);
                } else if path == LwPath::resource(OBJ_BUZZER, 0, RES_ON_OFF) {
                    self.stats.buzzer += 1;
                }
            }
            ClientEvent::TimeSync { server_time } => {
                self.stats.time_syncs += 1;
                self.clock_offset_ms = server_time.0 - now.0;
            }
            _ => {}
        }
    }

    fn drain_events(&mut self, now: Timestamp) {
        while let Some(ev) = self.messenger.poll_event() {
            match ev {
                ExchangeEvent::Request { peer, msg } => {
                    if let Some(ce) = self.client.handle_request(peer, &msg, now, &mut self.messenger) {
                        self.on_client_event(ce, now);
                    }
                }
                ExchangeEvent::Response { token, msg, .. } => {
                    if self.fota_token.as_deref() == Some(&token[..]) {
                        self.fota_token = None;
                        self.fota.on_chunk(&msg, now);
                        self.fota.sync(&mut self.client.model);
                    } else if let Some(ce) = self.client.handle_response(&token, &msg, now) {
                        self.on_client_event(ce, now);
                    }
                }
                ExchangeEvent::Timeout { token, .. } => {
                    if self.fota_token.as_deref() == Some(&token[..]) {
                        self.fota_token = None;
                        self.fota.on_fetch_failed();
                        self.fota.sync(&mut self.client.model);
                    } else {
                        let registering = self.client.state() == ClientState::Registering;
                        if let Some(ce) = self.client.handle_failure(&token, now) {
                            self.on_client_event(ce, now);
                        }
                        if !registering {
                            self.link_lost(now, Duration::ZERO);
                            return;
                        }
                    }
                }
                ExchangeEvent::Reset { .. } => {}
            }
        }
    }

    fn flush(&mut self) {
        let Some(session) = self.session.as_mut() else {
            // nothing may leave unencrypted
            while self.messenger.poll_transmit().is_some() {}
            return;
        };
        while let Some((peer, bytes)) = self.messenger.poll_transmit() {
            match session.seal(&bytes) {
                Ok(rec) => self.outbox.push_back((peer, psk::frame_record(&rec))),
                Err(e) => log::warn!("{}: seal failed: {e}", self.spec.endpoint),
            }
        }
    }

    fn next_crash_at(&self) -> Option<Timestamp> {
        let c = self.cfg.faults.crashes.get(self.next_crash)?;
        Some(self.cfg.env.start + Duration::from_millis((c.at_s * 1000.0).round() as u64))
    }
}

impl Node for DeviceNode {
    fn addr(&self) -> SocketAddr {
        self.cfg.addr
    }

    fn handle_datagram(&mut self, from: SocketAddr, bytes: &[u8], now: Timestamp) {
        if !self.powered || from != self.cfg.server {
            return;
        }
        match psk::classify(bytes) {
            Ok(Datagram::ServerHello(_)) => {
                let Some(hs) = self.handshake.take() else { return };
                match hs.finish(bytes) {
                    Ok(s) => {
                        self.session = Some(s);
                        self.client.register(now, &mut self.messenger);
                    }
                    Err(e) => {
                        log::warn!("{}: handshake: {e}", self.spec.endpoint);
                        self.stats.handshake_failures += 1;
                        self.hs_retry_at = Some(now + HANDSHAKE_RETRY);
                    }
                }
            }
            Ok(Datagram::Alert(code)) => {
                self.stats.alerts += 1;
                if self.handshake.take().is_some() {
                    log::warn!("{}: handshake refused ({code})", self.spec.endpoint);
                    self.stats.handshake_failures += 1;
                    self.hs_retry_at = Some(now + psk::HANDSHAKE_TIMEOUT);
                } else if self.session.is_some() {
                    self.link_lost(now, Duration::ZERO);
                }
            }
            Ok(Datagram::Record(body)) => {
                let Some(s) = self.session.as_mut() else { return };
                match s.open(body) {
                    Ok(pt) => {
                        self.messenger.handle_datagram(from, &pt, now);
                        self.drain_events(now);
                    }
                    Err(e) => log::debug!("{}: dropped record: {e}", self.spec.endpoint),
                }
            }
            Ok(Datagram::ClientHello(_)) | Err(_) => {}
        }
        self.flush();
    }

    fn handle_timeout(&mut self, now: Timestamp) {
        if self.powered && self.next_crash_at().is_some_and(|t| t <= now) {
            let down = self.cfg.faults.crashes[self.next_crash].restart_after_s;
            self.next_crash += 1;
            self.crash(now, Duration::from_millis((down * 1000.0).round() as u64));
            return;
        }
        if !self.powered {
            if self.power_on_at.is_some_and(|t| t <= now) {
                self.power_on(now);
            } else {
                return;
            }
        }
        if self.reboot_at.is_some_and(|t| t <= now) {
            self.stats.reboots += 1;
            self.power_off();
            if let Some(v) = self.fota.boot() {
                self.set_running_fw(v);
            }
            self.power_on(now);
        }
        if let Some(hs) = &self.handshake {
            if hs.check_timeout(now).is_err() {
                self.handshake = None;
                self.stats.handshake_failures += 1;
                self.start_handshake(now);
            }
        }
        if self.hs_retry_at.is_some_and(|t| t <= now) {
            self.start_handshake(now);
        }
        if self.session.is_some() {
            self.client.handle_timeout(now, &mut self.messenger);
            self.sample_due(now);
            if self.fota_token.is_none() {
                if let Some(req) = self.fota.fetch_request(now) {
                    match self.messenger.send_request(self.cfg.server, req, now) {
                        Ok(tok) => self.fota_token = Some(tok),
                        Err(_) => self.fota.on_fetch_failed(),
                    }
                }
            }
            self.messenger.handle_timeout(now);
            self.drain_events(now);
        }
        self.flush();
    }

    fn poll_timeout(&self) -> Option<Timestamp> {
        if !self.powered {
            return self.power_on_at;
        }
        let mut t = [
            self.next_crash_at(),
            self.reboot_at,
            self.hs_retry_at,
            self.handshake.as_ref().map(|h| h.deadline()),
        ]
        .into_iter()
        .flatten()
        .min();
        if self.session.is_some() {
            let more = [
                self.client.poll_timeout(),
                self.messenger.poll_timeout(),
                if self.fota_token.is_none() { self.fota.poll_timeout() } else { None },
            ];
            t = t.into_iter().chain(more.into_iter().flatten()).min();
        }
        t
    }

    fn poll_transmit(&mut self) -> Option<(SocketAddr, Vec<u8>)> {
        self.outbox.pop_front()
    }

    fn handle_unreachable(&mut self, _now: Timestamp) {
        self.stats.unreachable += 1;
    }
}

fn build_model(spec: &DeviceSpec) -> ObjectModel {
    let mut m = ObjectModel::new();
    let dev = |r| LwPath::resource(OBJ_DEVICE, 0, r);
    m.define(dev(0), Operations::R, Some(ResourceValue::Str("MakeSense".into())));
    m.define(dev(DEVICE_FW_VERSION), Operations::R, Some(ResourceValue::Str(String::new())));
    m.define(dev(DEVICE_REBOOT), Operations::E, None);
    m.define(dev(DEVICE_CURRENT_TIME), Operations::RW, Some(ResourceValue::Float(0.0)));
    FotaClient::define(&mut m);
    let mut sensor = |obj: u16, inst: u16| {
        m.define(LwPath::resource(obj, inst, RES_SENSOR_VALUE), Operations::R, Some(ResourceValue::Float(0.0)));
        m.define(LwPath::resource(obj, inst, RES_UNIT), Operations::R, Some(ResourceValue::Str(unit_of(obj).into())));
    };
    for &s in &spec.sensors {
        match s {
            OBJ_WRISTBAND => spec.bands.iter().for_each(|&b| sensor(OBJ_WRISTBAND, b)),
            OBJ_ENERGY => (0..spec.channels.len() as u16).for_each(|i| sensor(OBJ_ENERGY, i)),
            obj => sensor(obj, 0),
        }
    }
    if spec.kind == DeviceKind::Egg {
        m.define(LwPath::resource(OBJ_BUZZER, 0, RES_ON_OFF), Operations::E, None);
        m.define(LwPath::resource(OBJ_LIGHT_CONTROL, 0, RES_ON_OFF), Operations::RW, Some(ResourceValue::Bool(false)));
    }
    m
}
