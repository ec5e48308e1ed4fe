//! Registration-driven observation, pseudonymization and republishing.

pub mod blacklist;
pub mod pseudonym;
pub mod supervisor;

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

pub use blacklist::{Blacklist, BlacklistEntry};
pub use pseudonym::{split_endpoint, PseudoIds, PseudonymTable, Pseudonymizer};
pub use supervisor::{RestartEvent, RestartPolicy, Supervisor, WorkerHealth, WorkerStatus};

use crate::clock::Timestamp;
use crate::lwm2m::{decode_records, is_measurement, unit_of, LwPath, Registration, RES_SENSOR_VALUE};
use crate::reading::SensorReading;

pub const RESYNC_THRESHOLD: Duration = Duration::from_secs(2);

#[derive(Clone, Debug)]
pub struct CollectorConfig {
    pub default_period: Duration,
    /// per object id
    pub periods: HashMap<u16, Duration>,
    pub default_site: String,
    pub resync_threshold: Duration,
    pub observe_retries: u32,
}

impl Default for CollectorConfig {
    fn default() -> Self {
        CollectorConfig {
            default_period: Duration::from_secs(1),
            periods: HashMap::from([(crate::lwm2m::OBJ_ENERGY, Duration::from_secs(6))]),
            default_site: "office".into(),
            resync_threshold: RESYNC_THRESHOLD,
            observe_retries: 3,
        }
    }
}

impl CollectorConfig {
    pub fn period_for(&self, object: u16) -> Duration {
        self.periods
            .get(&object)
            .copied()
            .unwrap_or(self.default_period)
    }
}

#[derive(Debug, Error)]
pub enum CollectorError {
    #[error("unparseable notification: {0}")]
    ParseError(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Line-delimited JSON quarantine for payloads that failed to parse.
#[derive(Debug)]
pub struct DeadLetter {
    file: Option<(PathBuf, File)>,
    count: u64,
}

#[derive(Serialize)]
struct DeadLetterLine<'a> {
    server_time: String,
    endpoint: &'a str,
    reason: &'a str,
    payload: String,
}

impl DeadLetter {
    pub fn in_memory() -> Self {
        DeadLetter {
            file: None,
            count: 0,
        }
    }

    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(DeadLetter {
            file: Some((path.to_path_buf(), f)),
            count: 0,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }

    /// `endpoint` must already be pseudonymous.
    pub fn record(
        &mut self,
        endpoint: &str,
        reason: &str,
        payload: &[u8],
        now: Timestamp,
    ) -> io::Result<()> {
        self.count += 1;
        if let Some((_, f)) = &mut self.file {
            let line = DeadLetterLine {
                server_time: now.to_rfc3339(),
                endpoint,
                reason,
                payload: String::from_utf8_lossy(payload).into_owned(),
            };
            serde_json::to_writer(&mut *f, &line)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CollectorStats {
    pub notifications: u64,
    pub readings_published: u64,
    pub dead_lettered: u64,
    pub observations_started: u64,
    pub time_syncs: u64,
}

#[derive(Debug)]
pub struct Collector {
    pub config: CollectorConfig,
    pub pseudonyms: Pseudonymizer,
    pub blacklist: Blacklist,
    pub dead_letter: DeadLetter,
    pub stats: CollectorStats,
}

impl Collector {
    pub fn new(
        config: CollectorConfig,
        table: PseudonymTable,
        blacklist: Blacklist,
        dead_letter: DeadLetter,
    ) -> Self {
        let site = config.default_site.clone();
        Collector {
            config,
            pseudonyms: Pseudonymizer::new(table, site),
            blacklist,
            dead_letter,
            stats: CollectorStats::default(),
        }
    }

    /// Sensor value paths to observe for a registration: every advertised
    /// measurement instance that is not blacklisted.
    pub fn observe_plan(&self, reg: &Registration) -> Vec<(LwPath, Duration)> {
        reg.links
            .iter()
            .filter(|l| is_measurement(l.path.object))
            .map(|l| l.path.with_resource(RES_SENSOR_VALUE))
            .filter(|p| !self.blacklist.is_blocked(&reg.endpoint, *p))
            .map(|p| (p, self.config.period_for(p.object)))
            .collect()
    }

    /// Turns a notification payload into pseudonymized readings. Bad
    /// payloads go to the dead-letter file and yield `ParseError`.
    pub fn on_notification(
        &mut self,
        raw_endpoint: &str,
        payload: &[u8],
        server_time: Timestamp,
    ) -> Result<Vec<SensorReading>, CollectorError> {
        self.stats.notifications += 1;
        let ids = self.pseudonyms.ids(raw_endpoint)?;
        let parsed = decode_records(payload).and_then(|recs| {
            recs.into_iter()
                .map(|r| {
                    let path = r.path()?;
                    let (Some(inst), Some(res)) = (path.instance, path.resource) else {
                        return Err(crate::lwm2m::Lwm2mError::BadPayload(format!(
                            "record {path} is not a resource"
                        )));
                    };
                    let value = r.v.ok_or_else(|| {
                        crate::lwm2m::Lwm2mError::BadPayload(format!("record {path} has no number"))
                    })?;
                    Ok(SensorReading {
                        pseudonym: ids.pseudonym.clone(),
                        endpoint: ids.endpoint.clone(),
                        object_id: path.object,
                        instance: inst,
                        resource: res,
                        value,
                        unit: unit_of(path.object).to_string(),
                        device_time: r.t.map(Timestamp::from_secs_f64).unwrap_or(server_time),
                        server_time,
                        site: ids.site.clone(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()
        });
        match parsed {
            Ok(v) => {
                self.stats.readings_published += v.len() as u64;
                Ok(v)
            }
            Err(e) => {
                self.stats.dead_lettered += 1;
                let reason = e.to_string();
                self.dead_letter
                    .record(&ids.endpoint, &reason, payload, server_time)?;
                Err(CollectorError::ParseError(reason))
            }
        }
    }

    pub fn needs_time_sync(&self, device_time: Timestamp, server_time: Timestamp) -> bool {
        (device_time.0 - server_time.0).unsigned_abs() as u128
            > self.config.resync_threshold.as_millis()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lwm2m::parse_links;
    use std::net::SocketAddr;

    fn collector() -> Collector {
        Collector::new(
            CollectorConfig::default(),
            PseudonymTable::in_memory(9),
            Blacklist::new(),
            DeadLetter::in_memory(),
        )
    }

    fn reg(ep: &str, links: &str) -> Registration {
        Registration {
            endpoint: ep.into(),
            lifetime_s: 300,
            registration_id: "1".into(),
            links: parse_links(links).unwrap(),
            address: SocketAddr::from(([10, 0, 0, 1], 1)),
            registered_at: Timestamp(0),
            last_update: Timestamp(0),
        }
    }

    #[test]
    fn plan_fans_out_per_link() {
        let c = collector();
        let plan = c.observe_plan(&reg("egg-1", "</3/0>,</3303/0>,</3304/0>,</3338/0>"));
        let paths: Vec<String> = plan.iter().map(|(p, _)| p.to_string()).collect();
        assert_eq!(paths, ["/3303/0/5700", "/3304/0/5700"]);
    }

    #[test]
    fn plan_respects_blacklist() {
        let mut c = collector();
        c.blacklist.add("egg-5 /3324/0".parse().unwrap()).unwrap();
        let plan = c.observe_plan(&reg("egg-5", "</3303/0>,</3324/0>"));
        assert_eq!(plan.len(), 1);
        assert_eq!(plan[0].0, LwPath::resource(3303, 0, 5700));
        let other = c.observe_plan(&reg("egg-6", "</3303/0>,</3324/0>"));
        assert_eq!(other.len(), 2);
    }

    #[test]
    fn energy_uses_its_own_period() {
        let c = collector();
        let plan = c.observe_plan(&reg("hub", "</3305/0>,</3303/0>"));
        assert_eq!(plan[0].1, Duration::from_secs(6));
        assert_eq!(plan[1].1, Duration::from_secs(1));
    }

    #[test]
    fn notification_is_pseudonymized() {
        let mut c = collector();
        let out = c
            .on_notification(
                "H3.egg-017",
                br#"[{"n":"/3303/0/5700","v":22.5,"t":1704067203.5}]"#,
                Timestamp(1_704_067_204_000),
            )
            .unwrap();
        assert_eq!(out.len(), 1);
        let r = &out[0];
        assert_eq!(r.value, 22.5);
        assert_eq!(r.device_time, Timestamp(1_704_067_203_500));
        assert_eq!(r.unit, "°C");
        let bytes = r.encode();
        assert!(!bytes.windows(2).any(|w| w == b"H3"));
        assert!(!format!("{r:?}").contains("H3"));
    }

    #[test]
    fn malformed_goes_to_dead_letter() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Collector::new(
            CollectorConfig::default(),
            PseudonymTable::in_memory(9),
            Blacklist::new(),
            DeadLetter::open(dir.path().join("dead.jsonl")).unwrap(),
        );
        assert!(matches!(
            c.on_notification("household-03.egg-1", b"garbage", Timestamp(0)),
            Err(CollectorError::ParseError(_))
        ));
        assert_eq!(c.dead_letter.count(), 1);
        let text = std::fs::read_to_string(dir.path().join("dead.jsonl")).unwrap();
        assert!(text.contains("garbage"));
        assert!(!text.contains("household-03"));
        // pipeline continues
        assert!(c
            .on_notification("household-03.egg-1", br#"[{"n":"/3303/0/5700","v":1}]"#, Timestamp(0))
            .is_ok());
    }

    #[test]
    fn resync_threshold() {
        let c = collector();
        assert!(!c.needs_time_sync(Timestamp(2000), Timestamp(0)));
        assert!(c.needs_time_sync(Timestamp(2001), Timestamp(0)));
        assert!(c.needs_time_sync(Timestamp(0), Timestamp(2001)));
    }
}
