use std::collections::BTreeMap;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::signal::{Episode, SensorProfile, SignalModel};
use crate::clock::Timestamp;
use crate::lwm2m::{OBJ_ENERGY, OBJ_WRISTBAND};

pub const OFFICE_SENSORS: [u16; 7] = [3301, 3303, 3304, 3324, 3325, 3330, 3348];
pub const HOME_SENSORS: [u16; 5] = [3303, 3304, 3301, 3324, 3330];
pub const HOME_EGGS_MIN: usize = 13;
pub const HOME_EGGS_MAX: usize = 22;
pub const MIN_SAMPLE_INTERVAL_MS: u64 = 100;
pub const QUALITY_SAMPLE_INTERVAL_MS: u64 = 10_000;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Office,
    Home,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomSpec {
    pub name: String,
    #[serde(default)]
    pub x: f64,
    #[serde(default)]
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSpec {
    pub site_id: String,
    /// Seeded in the home range when absent.
    #[serde(default)]
    pub egg_count: Option<usize>,
    pub rooms: Vec<RoomSpec>,
    /// Room per egg index; eggs cycle through `rooms` otherwise.
    #[serde(default)]
    pub egg_rooms: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stay {
    pub room: String,
    pub from_s: f64,
    pub to_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WristbandSpec {
    pub band: u16,
    pub site: String,
    #[serde(default)]
    pub person: Option<String>,
    #[serde(default)]
    pub schedule: Vec<Stay>,
}

impl WristbandSpec {
    pub fn room_at(&self, rel_s: f64) -> Option<&str> {
        self.schedule
            .iter()
            .find(|s| rel_s >= s.from_s && rel_s < s.to_s)
            .map(|s| s.room.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyChannelSpec {
    pub site: String,
    pub name: String,
    pub idle_w: f64,
    pub active_w: f64,
    #[serde(default)]
    pub on: Vec<[f64; 2]>,
}

impl EnergyChannelSpec {
    pub fn watts_at(&self, rel_s: f64) -> f64 {
        if self.on.iter().any(|[a, b]| rel_s >= *a && rel_s < *b) {
            self.active_w
        } else {
            self.idle_w
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalOverride {
    pub sensor: u16,
    pub baseline: f64,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default = "neg_inf")]
    pub min: f64,
    #[serde(default = "pos_inf")]
    pub max: f64,
}

fn neg_inf() -> f64 {
    f64::MIN
}
fn pos_inf() -> f64 {
    f64::MAX
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    /// Virtual start, unix ms.
    #[serde(default)]
    pub start_ms: Option<i64>,
    #[serde(default)]
    pub sample_interval_ms: Option<u64>,
    #[serde(default = "default_energy_interval")]
    pub energy_interval_ms: u64,
    #[serde(default)]
    pub sensors: Option<Vec<u16>>,
    #[serde(default = "default_lifetime")]
    pub lifetime_s: u32,
    #[serde(default)]
    pub proximity_clamp_cm: Option<f64>,
    #[serde(default = "default_fw")]
    pub fw_version: String,
    #[serde(default)]
    pub rssi_sigma_db: Option<f64>,
    #[serde(default)]
    pub device_noise_sigma: f64,
    /// Initial device clock error.
    #[serde(default)]
    pub clock_skew_ms: i64,
    #[serde(default)]
    pub sites: Vec<SiteSpec>,
    #[serde(default)]
    pub wristbands: Vec<WristbandSpec>,
    #[serde(default)]
    pub energy_channels: Vec<EnergyChannelSpec>,
    #[serde(default)]
    pub episodes: Vec<Episode>,
    #[serde(default)]
    pub signals: Vec<SignalOverride>,
}

fn default_duration() -> f64 {
    600.0
}
fn default_energy_interval() -> u64 {
    6000
}
fn default_lifetime() -> u32 {
    300
}
fn default_fw() -> String {
    "1.0.0".into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeviceKind {
    Egg,
    Hub,
}

/// One simulated device, fully resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceSpec {
    pub kind: DeviceKind,
    /// Raw endpoint name sent at registration.
    pub endpoint: String,
    pub site: String,
    pub room: String,
    pub position: (f64, f64),
    pub sensors: Vec<u16>,
    /// Wristbands exposed as /27000/<band>.
    pub bands: Vec<u16>,
    /// Energy channel names exposed as /3305/<index>.
    pub channels: Vec<String>,
    pub sample_interval: Duration,
}

impl ScenarioSpec {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let s: ScenarioSpec = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    /// One open-plan floor with `eggs` eggs in ten rooms.
    pub fn office(eggs: usize, seed: u64) -> Self {
        let rooms = (0..10)
            .map(|i| RoomSpec {
                name: format!("room-{i}"),
                x: (i % 5) as f64 * 8.0,
                y: (i / 5) as f64 * 8.0,
            })
            .collect();
        ScenarioSpec {
            sites: vec![SiteSpec {
                site_id: "office".into(),
                egg_count: Some(eggs),
                rooms,
                egg_rooms: None,
            }],
            ..ScenarioSpec::empty(ScenarioKind::Office, seed)
        }
    }

    /// `sites` households with one wristband each and three metered
    /// appliances per hub.
    pub fn home(sites: usize, seed: u64) -> Self {
        let layout = [
            ("kitchen", 0.0, 0.0),
            ("living", 6.0, 0.0),
            ("bedroom", 6.0, 6.0),
            ("bathroom", 0.0, 6.0),
            ("hall", 3.0, 3.0),
        ];
        let mut s = ScenarioSpec::empty(ScenarioKind::Home, seed);
        for i in 1..=sites {
            let site = format!("household-{i:02}");
            s.sites.push(SiteSpec {
                site_id: site.clone(),
                egg_count: None,
                rooms: layout
                    .iter()
                    .map(|(n, x, y)| RoomSpec {
                        name: (*n).into(),
                        x: *x,
                        y: *y,
                    })
                    .collect(),
                egg_rooms: None,
            });
            s.wristbands.push(WristbandSpec {
                band: 1,
                site: site.clone(),
                person: Some(format!("resident-{i:02}a")),
                schedule: (0..24)
                    .map(|h| Stay {
                        room: layout[h % layout.len()].0.into(),
                        from_s: h as f64 * 3600.0,
                        to_s: (h + 1) as f64 * 3600.0,
                    })
                    .collect(),
            });
            for (name, idle, active, on) in [
                ("fridge", 40.0, 120.0, vec![[0.0, 900.0], [1800.0, 2700.0]]),
                ("washing-machine", 1.0, 500.0, vec![[600.0, 2400.0]]),
                ("kettle", 0.0, 2000.0, vec![[300.0, 420.0]]),
            ] {
                s.energy_channels.push(EnergyChannelSpec {
                    site: site.clone(),
                    name: name.into(),
                    idle_w: idle,
                    active_w: active,
                    on,
                });
            }
        }
        s
    }

    /// Co-located eggs on one bench for side-by-side comparison.
    pub fn quality(eggs: usize, seed: u64) -> Self {
        ScenarioSpec {
            sample_interval_ms: Some(QUALITY_SAMPLE_INTERVAL_MS),
            sites: vec![SiteSpec {
                site_id: "lab".into(),
                egg_count: Some(eggs),
                rooms: vec![RoomSpec {
                    name: "bench".into(),
                    x: 0.0,
                    y: 0.0,
                }],
                egg_rooms: None,
            }],
            ..ScenarioSpec::empty(ScenarioKind::Office, seed)
        }
    }

    pub fn empty(kind: ScenarioKind, seed: u64) -> Self {
        ScenarioSpec {
            kind,
            seed,
            duration_s: default_duration(),
            start_ms: None,
            sample_interval_ms: None,
            energy_interval_ms: default_energy_interval(),
            sensors: None,
            lifetime_s: default_lifetime(),
            proximity_clamp_cm: None,
            fw_version: default_fw(),
            rssi_sigma_db: None,
            device_noise_sigma: 0.0,
            clock_skew_ms: 0,
            sites: Vec::new(),
            wristbands: Vec::new(),
            energy_channels: Vec::new(),
            episodes: Vec::new(),
            signals: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.sites.is_empty() {
            return bad("no sites".into());
        }
        if !(self.duration_s > 0.0) {
            return bad("duration_s must be positive".into());
        }
        if self.sample_interval().as_millis() < MIN_SAMPLE_INTERVAL_MS as u128 {
            return bad(format!("sample_interval_ms below {MIN_SAMPLE_INTERVAL_MS}"));
        }
        if self.energy_interval_ms < MIN_SAMPLE_INTERVAL_MS {
            return bad(format!("energy_interval_ms below {MIN_SAMPLE_INTERVAL_MS}"));
        }
        let clamp = self.proximity_clamp_cm();
        if !(clamp > 0.0 && clamp <= 150.0) {
            return bad("proximity_clamp_cm must be in (0, 150]".into());
        }
        if self.lifetime_s < 2 {
            return bad("lifetime_s must be at least 2".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for site in &self.sites {
            if site.site_id.is_empty() || site.site_id.contains(['.', '/', ' ']) {
                return bad(format!("bad site_id {:?}", site.site_id));
            }
            if !seen.insert(site.site_id.as_str()) {
                return bad(format!("duplicate site {}", site.site_id));
            }
            if site.rooms.is_empty() {
                return bad(format!("site {} has no rooms", site.site_id));
            }
            for r in site.egg_rooms.iter().flatten() {
                if !site.rooms.iter().any(|x| &x.name == r) {
                    return bad(format!("site {} has no room {r}", site.site_id));
                }
            }
        }
        for b in &self.wristbands {
            let Some(site) = self.sites.iter().find(|s| s.site_id == b.site) else {
                return bad(format!("wristband {} names unknown site {}", b.band, b.site));
            };
            for st in &b.schedule {
                if !site.rooms.iter().any(|r| r.name == st.room) {
                    return bad(format!("wristband {} names unknown room {}", b.band, st.room));
                }
            }
        }
        for c in &self.energy_channels {
            if !self.sites.iter().any(|s| s.site_id == c.site) {
                return bad(format!("energy channel {} names unknown site {}", c.name, c.site));
            }
        }
        for e in &self.episodes {
            if e.delta.is_none() && e.value.is_none() {
                return bad(format!("episode on {} has neither delta nor value", e.sensor));
            }
        }
        Ok(())
    }

    pub fn start(&self) -> Timestamp {
        self.start_ms
            .map(Timestamp)
            .unwrap_or(crate::clock::DEFAULT_EPOCH)
    }

    pub fn end(&self) -> Timestamp {
        self.start() + Duration::from_millis((self.duration_s * 1000.0).round() as u64)
    }

    pub fn sample_interval(&self) -> Duration {
        Duration::from_millis(self.sample_interval_ms.unwrap_or(match self.kind {
            ScenarioKind::Office => 1000,
            ScenarioKind::Home => 3000,
        }))
    }

    pub fn energy_interval(&self) -> Duration {
        Duration::from_millis(self.energy_interval_ms)
    }

    pub fn proximity_clamp_cm(&self) -> f64 {
        self.proximity_clamp_cm.unwrap_or(match self.kind {
            ScenarioKind::Office => 150.0,
            ScenarioKind::Home => 80.0,
        })
    }

    pub fn rssi_sigma_db(&self) -> f64 {
        self.rssi_sigma_db
            .unwrap_or(super::radio::DEFAULT_RSSI_SIGMA_DB)
    }

    pub fn sensors(&self) -> Vec<u16> {
        self.sensors.clone().unwrap_or_else(|| match self.kind {
            ScenarioKind::Office => OFFICE_SENSORS.to_vec(),
            ScenarioKind::Home => HOME_SENSORS.to_vec(),
        })
    }

    /// Egg count per site; unset home sites draw from [13, 22].
    pub fn egg_counts(&self) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_e995);
        self.sites
            .iter()
            .map(|s| {
                let drawn = rng.gen_range(HOME_EGGS_MIN..=HOME_EGGS_MAX);
                s.egg_count.unwrap_or(match self.kind {
                    ScenarioKind::Home => drawn,
                    ScenarioKind::Office => 100,
                })
            })
            .collect()
    }

    pub fn signal_model(&self) -> SignalModel<f64> {
        let mut m = SignalModel::new(self.seed, self.start());
        m.proximity_clamp_cm = self.proximity_clamp_cm();
        m.episodes = self.episodes.clone();
        m.device_sigma = self.device_noise_sigma;
        for o in &self.signals {
            m.profiles.insert(
                o.sensor,
                SensorProfile::new(o.baseline, o.amplitude, o.sigma, o.min, o.max),
            );
        }
        m
    }

    /// Endpoint name of egg `i` at `site`. The first office site uses bare
    /// names.
    pub fn egg_endpoint(&self, site_index: usize, i: usize) -> String {
        let site = &self.sites[site_index].site_id;
        match self.kind {
            ScenarioKind::Office if site_index == 0 => format!("egg-{i:03}"),
            ScenarioKind::Office => format!("{site}.egg-{i:03}"),
            ScenarioKind::Home => format!("{site}.egg-{i:02}"),
        }
    }

    /// Collector site for bare endpoint names.
    pub fn default_site(&self) -> &str {
        &self.sites[0].site_id
    }

    pub fn devices(&self) -> Vec<DeviceSpec> {
        let counts = self.egg_counts();
        let sensors = self.sensors();
        let mut out = Vec::new();
        for (si, site) in self.sites.iter().enumerate() {
            let bands: Vec<u16> = self
                .wristbands
                .iter()
                .filter(|b| b.site == site.site_id)
                .map(|b| b.band)
                .collect();
            for i in 0..counts[si] {
                let room_name = match &site.egg_rooms {
                    Some(rs) if !rs.is_empty() => rs[i % rs.len()].clone(),
                    _ => site.rooms[i % site.rooms.len()].name.clone(),
                };
                let room = site.rooms.iter().find(|r| r.name == room_name).expect("validated");
                let mut sens = sensors.clone();
                if !bands.is_empty() {
                    sens.push(OBJ_WRISTBAND);
                }
                out.push(DeviceSpec {
                    kind: DeviceKind::Egg,
                    endpoint: self.egg_endpoint(si, i),
                    site: site.site_id.clone(),
                    room: room.name.clone(),
                    position: (room.x, room.y),
                    sensors: sens,
                    bands: bands.clone(),
                    channels: Vec::new(),
                    sample_interval: self.sample_interval(),
                });
            }
            let channels: Vec<String> = self
                .energy_channels
                .iter()
                .filter(|c| c.site == site.site_id)
                .map(|c| c.name.clone())
                .collect();
            if !channels.is_empty() {
                out.push(DeviceSpec {
                    kind: DeviceKind::Hub,
                    endpoint: format!("{}.hub", site.site_id),
                    site: site.site_id.clone(),
                    room: site.rooms[0].name.clone(),
                    position: (site.rooms[0].x, site.rooms[0].y),
                    sensors: vec![OBJ_ENERGY],
                    bands: Vec::new(),
                    channels,
                    sample_interval: self.energy_interval(),
                });
            }
        }
        out
    }

    /// Raw identifiers that must never reach storage: site ids and names of
    /// people.
    pub fn raw_identifiers(&self) -> Vec<String> {
        let mut v: Vec<String> = self.sites.iter().map(|s| s.site_id.clone()).collect();
        v.extend(self.wristbands.iter().filter_map(|b| b.person.clone()));
        v
    }

    pub fn room_position(&self, site: &str, room: &str) -> Option<(f64, f64)> {
        self.sites
            .iter()
            .find(|s| s.site_id == site)?
            .rooms
            .iter()
            .find(|r| r.name == room)
            .map(|r| (r.x, r.y))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrashFault {
    pub egg: String,
    pub at_s: f64,
    #[serde(default = "default_restart")]
    pub restart_after_s: f64,
}

fn default_restart() -> f64 {
    5.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SilentFault {
    pub egg: String,
    pub sensor: u16,
    pub from_s: f64,
    pub to_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasFault {
    pub egg: String,
    pub sensor: u16,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerCrash {
    pub worker: String,
    pub at_s: f64,
}

/// Injected faults, keyed by raw endpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultPlan {
    #[serde(default)]
    pub crash: Vec<CrashFault>,
    #[serde(default)]
    pub silent: Vec<SilentFault>,
    #[serde(default)]
    pub bias: Vec<BiasFault>,
    #[serde(default)]
    pub worker_crash: Vec<WorkerCrash>,
}

impl FaultPlan {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    pub fn for_egg(&self, endpoint: &str) -> EggFaults {
        EggFaults {
            crashes: self.crash.iter().filter(|c| c.egg == endpoint).cloned().collect(),
            silent: self.silent.iter().filter(|c| c.egg == endpoint).cloned().collect(),
            bias: self
                .bias
                .iter()
                .filter(|c| c.egg == endpoint)
                .map(|b| (b.sensor, b.delta))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EggFaults {
    pub crashes: Vec<CrashFault>,
    pub silent: Vec<SilentFault>,
    pub bias: BTreeMap<u16, f64>,
}

impl EggFaults {
    pub fn is_silent(&self, sensor: u16, rel_s: f64) -> bool {
        self.silent
            .iter()
            .any(|s| s.sensor == sensor && rel_s >= s.from_s && rel_s < s.to_s)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EggConfigError {
    #[error("line {0}: expected key=value")]
    Syntax(usize),
    #[error("missing key {0}")]
    Missing(&'static str),
    #[error("bad value for {key}: {value}")]
    BadValue { key: String, value: String },
    #[error("unknown key {0}")]
    UnknownKey(String),
}

/// On-device configuration file.
#[derive(Clone, Debug, PartialEq)]
pub struct EggConfig {
    pub egg_id: String,
    pub server_host: String,
    pub server_port: u16,
    pub psk_id: String,
    pub psk_key: String,
    pub sample_interval_ms: u64,
    pub enabled_sensors: Vec<u16>,
    pub room: Option<String>,
    pub proximity_clamp_cm: f64,
}

impl EggConfig {
    pub fn parse(text: &str) -> Result<Self, EggConfigError> {
        let mut kv = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(EggConfigError::Syntax(n + 1))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let bad = |k: &str, v: &str| EggConfigError::BadValue {
            key: k.into(),
            value: v.into(),
        };
        let mut take = |k: &'static str| kv.remove(k).ok_or(EggConfigError::Missing(k));
        let egg_id = take("egg_id")?;
        let server_host = take("server_host")?;
        let port = take("server_port")?;
        let server_port = port.parse().map_err(|_| bad("server_port", &port))?;
        let psk_id = take("psk_id")?;
        let psk_key = take("psk_key")?;
        if hex::decode(&psk_key).map(|k| k.len()) != Ok(16) {
            return Err(bad("psk_key", "<redacted>"));
        }
        let si = take("sample_interval_ms").unwrap_or_else(|_| "1000".into());
        let sample_interval_ms: u64 = si.parse().map_err(|_| bad("sample_interval_ms", &si))?;
        if sample_interval_ms < MIN_SAMPLE_INTERVAL_MS {
            return Err(bad("sample_interval_ms", &si));
        }
        let es = take("enabled_sensors").unwrap_or_default();
        let enabled_sensors = if es.is_empty() {
            OFFICE_SENSORS.to_vec()
        } else {
            es.split(',')
                .map(|s| s.trim().parse::<u16>().map_err(|_| bad("enabled_sensors", &es)))
                .collect::<Result<Vec<_>, _>>()?
        };
        let room = take("room").ok();
        let pc = take("proximity_clamp_cm").unwrap_or_else(|_| "150".into());
        let proximity_clamp_cm: f64 = pc.parse().map_err(|_| bad("proximity_clamp_cm", &pc))?;
        if !(proximity_clamp_cm > 0.0 && proximity_clamp_cm <= 150.0) {
            return Err(bad("proximity_clamp_cm", &pc));
        }
        kv.remove("wifi_ssid");
        kv.remove("wifi_pass");
        if let Some(k) = kv.into_keys().next() {
            return Err(EggConfigError::UnknownKey(k));
        }
        Ok(EggConfig {
            egg_id,
            server_host,
            server_port,
            psk_id,
            psk_key,
            sample_interval_ms,
            enabled_sensors,
            room,
            proximity_clamp_cm,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn home_counts_in_range() {
        let s = ScenarioSpec::home(20, 42);
        let counts = s.egg_counts();
        assert_eq!(counts.len(), 20);
        assert!(counts.iter().all(|c| (HOME_EGGS_MIN..=HOME_EGGS_MAX).contains(c)));
        let devs = s.devices();
        assert_eq!(devs.len(), counts.iter().sum::<usize>() + 20);
        assert!(devs.iter().any(|d| d.endpoint == "household-07.hub"));
        assert_eq!(s.egg_counts(), ScenarioSpec::home(20, 42).egg_counts());
    }

    #[test]
    fn office_defaults() {
        let s = ScenarioSpec::office(100, 1);
        let d = s.devices();
        assert_eq!(d.len(), 100);
        assert_eq!(d[5].endpoint, "egg-005");
        assert_eq!(d[5].sensors, OFFICE_SENSORS);
        assert_eq!(s.sample_interval(), Duration::from_secs(1));
        assert_eq!(s.proximity_clamp_cm(), 150.0);
    }

    #[test]
    fn toml_roundtrip_and_validation() {
        let s = ScenarioSpec::home(2, 9);
        let back = ScenarioSpec::from_toml(&s.to_toml()).unwrap();
        assert_eq!(back, s);
        let text = "kind = \"office\"\nsample_interval_ms = 50\n[[sites]]\nsite_id = \"a\"\nrooms = [{name = \"r\"}]\n";
        assert!(ScenarioSpec::from_toml(text).is_err());
        assert!(ScenarioSpec::from_toml("kind = \"office\"\nbogus = 1\n").is_err());
    }

    #[test]
    fn fault_plan_parses() {
        let f = FaultPlan::from_toml(
            "[[crash]]\negg = \"egg-005\"\nat_s = 10\nrestart_after_s = 5\n[[silent]]\negg = \"egg-001\"\nsensor = 3303\nfrom_s = 0\nto_s = 60\n[[worker_crash]]\nworker = \"storage\"\nat_s = 30\n",
        )
        .unwrap();
        let e = f.for_egg("egg-001");
        assert!(e.is_silent(3303, 59.9));
        assert!(!e.is_silent(3303, 60.0));
        assert_eq!(f.for_egg("egg-005").crashes.len(), 1);
    }

    #[test]
    fn egg_config() {
        let good = "egg_id=egg-1\nserver_host=127.0.0.1\nserver_port=5684\npsk_id=egg-1\npsk_key=000102030405060708090a0b0c0d0e0f\nwifi_ssid=x\nsample_interval_ms=500\nenabled_sensors=3303,3304\n";
        let c = EggConfig::parse(good).unwrap();
        assert_eq!(c.enabled_sensors, vec![3303, 3304]);
        assert_eq!(c.sample_interval_ms, 500);
        let low = good.replace("=500", "=50");
        assert!(matches!(EggConfig::parse(&low), Err(EggConfigError::BadValue { .. })));
        let clamp = format!("{good}proximity_clamp_cm=200\n");
        assert!(EggConfig::parse(&clamp).is_err());
        assert_eq!(
            EggConfig::parse("egg_id=a\n"),
            Err(EggConfigError::Missing("server_host"))
        );
    }
}
