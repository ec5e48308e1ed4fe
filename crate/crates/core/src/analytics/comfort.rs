use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::reading::SensorReading;

pub const OCCUPANCY_CM: f64 = 75.0;
pub const OCCUPANCY_FRESHNESS: Duration = Duration::from_secs(10);
pub const DEBOUNCE_SAMPLES: u32 = 3;
pub const COMFORT_COOLDOWN: Duration = Duration::from_secs(600);
pub const OBJ_PROXIMITY: u16 = 3330;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variable {
    Temperature,
    Humidity,
    Light,
    Dust,
}

impl Variable {
    pub const ALL: [Variable; 4] = [
        Variable::Temperature,
        Variable::Humidity,
        Variable::Light,
        Variable::Dust,
    ];

    pub fn object_id(self) -> u16 {
        match self {
            Variable::Temperature => 3303,
            Variable::Humidity => 3304,
            Variable::Light => 3301,
            Variable::Dust => 3325,
        }
    }

    pub fn from_object(id: u16) -> Option<Variable> {
        Variable::ALL.into_iter().find(|v| v.object_id() == id)
    }

    fn idx(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Variable::Temperature => "temperature",
            Variable::Humidity => "humidity",
            Variable::Light => "light",
            Variable::Dust => "dust",
        }
    }

    fn advice(self, too_high: bool) -> &'static str {
        match (self, too_high) {
            (Variable::Temperature, true) => "consider opening a window or lowering the air conditioning",
            (Variable::Temperature, false) => "consider raising the heating",
            (Variable::Humidity, true) => "consider ventilating the room",
            (Variable::Humidity, false) => "consider a humidifier",
            (Variable::Light, true) => "consider closing the blinds",
            (Variable::Light, false) => "consider switching on a desk lamp",
            (Variable::Dust, true) => "consider airing the room or running the air purifier",
            (Variable::Dust, false) => "dust is below target",
        }
    }
}

/// The six user-entered fields plus the monitoring switch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComfortPreference {
    pub desk: String,
    pub temperature: Option<f64>,
    pub humidity: Option<f64>,
    pub light: Option<f64>,
    pub dust: Option<f64>,
    pub email: String,
    #[serde(default)]
    pub monitoring: bool,
}

impl ComfortPreference {
    pub fn new(desk: impl Into<String>) -> Self {
        ComfortPreference {
            desk: desk.into(),
            temperature: None,
            humidity: None,
            light: None,
            dust: None,
            email: String::new(),
            monitoring: false,
        }
    }

    pub fn target(&self, v: Variable) -> Option<f64> {
        match v {
            Variable::Temperature => self.temperature,
            Variable::Humidity => self.humidity,
            Variable::Light => self.light,
            Variable::Dust => self.dust,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComfortConfig {
    /// per variable, in [`Variable::ALL`] order
    pub tolerance: [f64; 4],
    pub occupancy_cm: f64,
    pub freshness: Duration,
    pub debounce: u32,
    pub cooldown: Duration,
}

impl Default for ComfortConfig {
    fn default() -> Self {
        ComfortConfig {
            tolerance: [2.0, 10.0, 100.0, 10.0],
            occupancy_cm: OCCUPANCY_CM,
            freshness: OCCUPANCY_FRESHNESS,
            debounce: DEBOUNCE_SAMPLES,
            cooldown: COMFORT_COOLDOWN,
        }
    }
}

impl ComfortConfig {
    pub fn tolerance_of(&self, v: Variable) -> f64 {
        self.tolerance[v.idx()]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComfortActions {
    pub buzzer_executed: bool,
    pub email_record: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComfortEvent {
    pub desk: String,
    pub endpoint: String,
    pub variable: Variable,
    pub measured: f64,
    pub target: f64,
    pub fired_at: Timestamp,
    pub occupied: bool,
    pub actions: ComfortActions,
}

impl ComfortEvent {
    pub fn message(&self) -> String {
        let too_high = self.measured > self.target;
        format!(
            "{} at {} is {:.1} (target {:.1}): {}",
            self.variable.name(),
            self.desk,
            self.measured,
            self.target,
            self.variable.advice(too_high)
        )
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ComfortError {
    #[error("unknown desk {0}")]
    StalePreference(String),
    #[error("tolerance for {0} must be positive")]
    BadTolerance(&'static str),
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct SinkRecord {
    pub fired_at: String,
    pub desk: String,
    pub variable: Variable,
    pub measured: f64,
    pub target: f64,
    pub message: String,
}

/// Append-only record of notification e-mails.
#[derive(Debug, Default)]
pub struct NotificationSink {
    file: Option<File>,
    records: Vec<SinkRecord>,
}

impl NotificationSink {
    pub fn in_memory() -> Self {
        NotificationSink::default()
    }

    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        if let Some(d) = path.as_ref().parent() {
            std::fs::create_dir_all(d)?;
        }
        Ok(NotificationSink {
            file: Some(OpenOptions::new().create(true).append(true).open(path)?),
            records: Vec::new(),
        })
    }

    pub fn append(&mut self, e: &ComfortEvent) -> io::Result<()> {
        let rec = SinkRecord {
            fired_at: e.fired_at.to_rfc3339(),
            desk: e.desk.clone(),
            variable: e.variable,
            measured: e.measured,
            target: e.target,
            message: e.message(),
        };
        if let Some(f) = &mut self.file {
            serde_json::to_writer(&mut *f, &rec)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn records(&self) -> &[SinkRecord] {
        &self.records
    }
}

#[derive(Debug, Clone)]
struct Desk {
    endpoint: String,
    pref: ComfortPreference,
    proximity: Option<(f64, Timestamp)>,
    streak: [u32; 4],
    last_fired: [Option<Timestamp>; 4],
}

/// Desk comfort rules over the live reading stream. Time is each
/// reading's server time.
#[derive(Debug, Default)]
pub struct ComfortEngine {
    pub config: ComfortConfig,
    desks: BTreeMap<String, Desk>,
    by_endpoint: HashMap<String, String>,
    events: Vec<ComfortEvent>,
}

impl ComfortEngine {
    pub fn new(config: ComfortConfig) -> Result<Self, ComfortError> {
        for v in Variable::ALL {
            let tol = config.tolerance_of(v);
            if !(tol > 0.0) {
                return Err(ComfortError::BadTolerance(v.name()));
            }
        }
        Ok(ComfortEngine {
            config,
            ..ComfortEngine::default()
        })
    }

    /// Binds a desk to the (pseudonymous) endpoint of its egg.
    pub fn assign_desk(&mut self, desk: &str, endpoint: &str) {
        self.by_endpoint.insert(endpoint.to_string(), desk.to_string());
        self.desks
            .entry(desk.to_string())
            .and_modify(|d| d.endpoint = endpoint.to_string())
            .or_insert_with(|| Desk {
                endpoint: endpoint.to_string(),
                pref: ComfortPreference::new(desk),
                proximity: None,
                streak: [0; 4],
                last_fired: [None; 4],
            });
    }

    pub fn desks(&self) -> Vec<String> {
        self.desks.keys().cloned().collect()
    }

    pub fn endpoint_of(&self, desk: &str) -> Option<&str> {
        self.desks.get(desk).map(|d| d.endpoint.as_str())
    }

    fn desk_mut(&mut self, desk: &str) -> Result<&mut Desk, ComfortError> {
        self.desks
            .get_mut(desk)
            .ok_or_else(|| ComfortError::StalePreference(desk.into()))
    }

    pub fn preference(&self, desk: &str) -> Result<&ComfortPreference, ComfortError> {
        self.desks
            .get(desk)
            .map(|d| &d.pref)
            .ok_or_else(|| ComfortError::StalePreference(desk.into()))
    }

    /// Replaces the targets and e-mail; the monitoring switch is kept.
    pub fn set_preference(&mut self, mut pref: ComfortPreference) -> Result<(), ComfortError> {
        let d = self.desk_mut(&pref.desk.clone())?;
        pref.monitoring = d.pref.monitoring;
        d.pref = pref;
        d.streak = [0; 4];
        Ok(())
    }

    pub fn set_monitoring(&mut self, desk: &str, on: bool) -> Result<(), ComfortError> {
        let d = self.desk_mut(desk)?;
        d.pref.monitoring = on;
        d.streak = [0; 4];
        Ok(())
    }

    pub fn is_occupied(&self, desk: &str, now: Timestamp) -> bool {
        self.desks
            .get(desk)
            .is_some_and(|d| occupied(&self.config, d, now))
    }

    pub fn on_reading(&mut self, r: &SensorReading) -> Vec<ComfortEvent> {
        let Some(desk_name) = self.by_endpoint.get(&r.endpoint) else {
            return Vec::new();
        };
        let Some(d) = self.desks.get_mut(desk_name) else {
            return Vec::new();
        };
        let now = r.server_time;
        if r.object_id == OBJ_PROXIMITY {
            d.proximity = Some((r.value, now));
            return Vec::new();
        }
        let Some(var) = Variable::from_object(r.object_id) else {
            return Vec::new();
        };
        let i = var.idx();
        let target = d.pref.target(var);
        let (Some(target), true) = (target, d.pref.monitoring) else {
            d.streak[i] = 0;
            return Vec::new();
        };
        let occ = occupied(&self.config, d, now);
        if !(occ && (r.value - target).abs() > self.config.tolerance_of(var)) {
            d.streak[i] = 0;
            return Vec::new();
        }
        d.streak[i] += 1;
        let cooled = d.last_fired[i]
            .is_none_or(|t| now.saturating_sub(t) >= self.config.cooldown);
        if d.streak[i] < self.config.debounce || !cooled {
            return Vec::new();
        }
        d.last_fired[i] = Some(now);
        let ev = ComfortEvent {
            desk: desk_name.clone(),
            endpoint: d.endpoint.clone(),
            variable: var,
            measured: r.value,
            target,
            fired_at: now,
            occupied: true,
            actions: ComfortActions::default(),
        };
        self.events.push(ev.clone());
        vec![ev]
    }

    /// Every event fired so far, in order.
    pub fn events(&self) -> &[ComfortEvent] {
        &self.events
    }

    pub fn record_actions(&mut self, fired_at: Timestamp, desk: &str, variable: Variable, actions: ComfortActions) {
        if let Some(e) = self
            .events
            .iter_mut()
            .rev()
            .find(|e| e.fired_at == fired_at && e.desk == desk && e.variable == variable)
        {
            e.actions = actions;
        }
    }
}

fn occupied(cfg: &ComfortConfig, d: &Desk, now: Timestamp) -> bool {
    d.proximity
        .is_some_and(|(cm, at)| cm < cfg.occupancy_cm && now >= at && now.saturating_sub(at) <= cfg.freshness)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(obj: u16, v: f64, t_s: i64) -> SensorReading {
        SensorReading {
            pseudonym: "p".into(),
            endpoint: "ep".into(),
            object_id: obj,
            instance: 0,
            resource: 5700,
            value: v,
            unit: String::new(),
            device_time: Timestamp(t_s * 1000),
            server_time: Timestamp(t_s * 1000),
            site: "s".into(),
        }
    }

    fn engine() -> ComfortEngine {
        let mut e = ComfortEngine::new(ComfortConfig::default()).unwrap();
        e.assign_desk("desk-1", "ep");
        let mut p = ComfortPreference::new("desk-1");
        p.temperature = Some(22.0);
        e.set_preference(p).unwrap();
        e.set_monitoring("desk-1", true).unwrap();
        e
    }

    #[test]
    fn proximity_boundary_is_unoccupied() {
        let mut e = engine();
        e.on_reading(&r(3330, 75.0, 0));
        assert!(!e.is_occupied("desk-1", Timestamp(0)));
        for t in 1..10 {
            assert!(e.on_reading(&r(3303, 30.0, t)).is_empty());
        }
        e.on_reading(&r(3330, 74.9, 10));
        assert!(e.is_occupied("desk-1", Timestamp(10_000)));
        assert!(!e.is_occupied("desk-1", Timestamp(20_001)));
    }

    #[test]
    fn three_samples_then_cooldown() {
        let mut e = engine();
        let mut fired = Vec::new();
        for t in 0..300 {
            if t % 5 == 0 {
                e.on_reading(&r(3330, 40.0, t));
            }
            fired.extend(e.on_reading(&r(3303, 26.0, t)));
        }
        assert_eq!(fired.len(), 1);
        assert_eq!(fired[0].fired_at, Timestamp(2000));
        assert_eq!(fired[0].measured, 26.0);
    }

    #[test]
    fn within_tolerance_never_fires() {
        let mut e = engine();
        e.on_reading(&r(3330, 40.0, 0));
        for t in 0..5 {
            assert!(e.on_reading(&r(3303, 24.0, t)).is_empty());
        }
    }

    #[test]
    fn monitoring_off_gates_events() {
        let mut e = engine();
        e.set_monitoring("desk-1", false).unwrap();
        e.on_reading(&r(3330, 40.0, 0));
        for t in 0..5 {
            assert!(e.on_reading(&r(3303, 30.0, t)).is_empty());
        }
    }

    #[test]
    fn unknown_desk() {
        let mut e = engine();
        assert_eq!(
            e.set_monitoring("desk-99", true),
            Err(ComfortError::StalePreference("desk-99".into()))
        );
    }

    #[test]
    fn sink_writes_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let mut sink = NotificationSink::open(dir.path().join("mail.jsonl")).unwrap();
        let mut e = engine();
        e.on_reading(&r(3330, 40.0, 0));
        for t in 0..3 {
            for ev in e.on_reading(&r(3303, 18.0, t)) {
                sink.append(&ev).unwrap();
            }
        }
        let text = std::fs::read_to_string(dir.path().join("mail.jsonl")).unwrap();
        let rec: SinkRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(rec.desk, "desk-1");
        assert_eq!(rec.variable, Variable::Temperature);
        assert!(rec.message.contains("heating"));
    }
}
