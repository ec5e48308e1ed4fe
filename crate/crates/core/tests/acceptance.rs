//! One PASS/FAIL line per acceptance criterion. Run with `--nocapture` to
//! see the report.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::SocketAddr;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use makesense::analytics::comfort::{ComfortConfig, ComfortEngine, ComfortEvent, ComfortPreference, Variable};
use makesense::coap::{decode, encode, CoapMessage, Code, ExchangeEvent, MessageType, Messenger, OptionNumber, RetransmitParams};
use makesense::datastore::{export_csv, Query};
use makesense::eggsim::scenario::{Stay, WristbandSpec};
use makesense::eggsim::{Environment, FaultPlan, ScenarioSpec};
use makesense::fota::build_image;
use makesense::fota::orchestrator::PushResult;
use makesense::lwm2m::{DeregReason, Lwm2mClient, Lwm2mServer, LwPath, ObjectModel, Operations, ResourceValue, ServerEvent};
use makesense::psk::{handshake, KeyTable, PskError, PskIdentity, SecureSession};
use makesense::reading::SensorReading;
use makesense::sim::quality::quality_run;
use makesense::sim::virtual_testbed;
use makesense::Timestamp;

type Verdict = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

struct OfficeRun {
    stored: u64,
}

fn generated(tb: &makesense::sim::Testbed<makesense::backend::Backend>) -> u64 {
    tb.devices
        .iter()
        .map(|d| d.stats().generated.values().sum::<u64>())
        .sum()
}

/// 100 eggs for 10 minutes; returns the final stored count after a short drain.
fn office_run(plan: &FaultPlan) -> Result<(OfficeRun, String), String> {
    let dir = tempfile::tempdir().unwrap();
    let sc = ScenarioSpec::office(100, 2024);
    ensure!(sc.duration_s == 600.0, "office duration {}", sc.duration_s);
    let wall = Instant::now();
    let mut tb = virtual_testbed(&sc, plan, dir.path()).map_err(|e| e.to_string())?;
    tb.run_until(sc.end());
    let gen = generated(&tb);
    tb.run_for(Duration::from_secs(10));
    let elapsed = wall.elapsed();
    let m = tb.backend.metrics();
    let queryable = tb
        .backend
        .query(&Query::range(sc.start(), sc.end() + Duration::from_millis(1)))
        .map_err(|e| e.to_string())?
        .len() as u64;
    let per_egg_sensors: BTreeSet<usize> = tb
        .backend
        .devices()
        .iter()
        .map(|d| d.observed.len())
        .collect();
    ensure!(m.registered == 100, "registered {}", m.registered);
    ensure!(per_egg_sensors == BTreeSet::from([7]), "observed per egg {per_egg_sensors:?}");
    ensure!(
        m.stored == m.storage_received - m.deduped,
        "stored {} != received {} - dedup {}",
        m.stored,
        m.storage_received,
        m.deduped
    );
    ensure!(m.stored == tb.backend.store().count(), "store count {} vs metric {}", tb.backend.store().count(), m.stored);
    let ratio = queryable as f64 / gen as f64;
    ensure!(ratio >= 0.995, "queryable {queryable} of {gen} ({:.4})", ratio);
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok((
        OfficeRun { stored: m.stored },
        format!(
            "{queryable}/{gen} queryable ({:.3}%), stored={} received={} dedup={} dead-letter={} restarts={}, {:.1}s",
            ratio * 100.0,
            m.stored,
            m.storage_received,
            m.deduped,
            m.dead_lettered,
            m.worker_restarts,
            elapsed.as_secs_f64()
        ),
    ))
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn home_scale() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = ScenarioSpec::home(20, 77);
    let counts = sc.egg_counts();
    ensure!(counts.iter().all(|n| (13..=22).contains(n)), "egg counts {counts:?}");
    let warmup = Duration::from_secs(60);
    let window = Duration::from_secs(3600);
    sc.duration_s = (warmup + window).as_secs_f64() + 10.0;
    let mut tb = virtual_testbed(&sc, &FaultPlan::default(), dir.path()).map_err(|e| e.to_string())?;
    tb.run_until(sc.end());
    tb.backend.sync().map_err(|e| e.to_string())?;
    let t0 = sc.start() + warmup;
    let t1 = t0 + window;
    let mut per_series: BTreeMap<(String, u16, u16), u64> = BTreeMap::new();
    let all = tb.backend.store().all().map_err(|e| e.to_string())?;
    for r in &all {
        if r.device_time >= t0 && r.device_time < t1 {
            *per_series.entry((r.endpoint.clone(), r.object_id, r.instance)).or_default() += 1;
        }
    }
    let want_egg = window.as_millis() / sc.sample_interval().as_millis();
    let want_energy = window.as_millis() / sc.energy_interval().as_millis();
    let mut eggs = BTreeSet::new();
    let mut bad = Vec::new();
    for ((ep, obj, inst), n) in &per_series {
        let want = if *obj == 3305 { want_energy } else { want_egg };
        if *obj != 3305 && *obj != 27000 {
            eggs.insert(ep.clone());
        }
        if *n as u128 != want {
            bad.push(format!("{ep}/{obj}/{inst}={n} want {want}"));
        }
    }
    let total_eggs: usize = counts.iter().sum();
    ensure!(eggs.len() == total_eggs, "{} eggs reported, {total_eggs} deployed", eggs.len());
    ensure!(bad.is_empty(), "{} series off: {:?}", bad.len(), &bad[..bad.len().min(5)]);

    let export = dir.path().join("export.csv");
    export_csv(&all, std::fs::File::create(&export).unwrap()).map_err(|e| e.to_string())?;
    let raw = sc.raw_identifiers();
    ensure!(raw.iter().any(|r| r.starts_with("household-")), "no raw ids to scan for");
    let finders: Vec<_> = raw.iter().map(|id| memchr::memmem::Finder::new(id.as_bytes())).collect();
    let mut scanned = 0;
    for f in walk(dir.path()) {
        if f.file_name().unwrap() == "pseudonyms.tsv" {
            continue;
        }
        let bytes = std::fs::read(&f).unwrap();
        for (id, finder) in raw.iter().zip(&finders) {
            ensure!(finder.find(&bytes).is_none(), "{id} found in {}", f.display());
        }
        scanned += 1;
    }
    Ok(format!(
        "{} series exact ({want_egg} per egg sensor, {want_energy} per energy channel), {total_eggs} eggs, {scanned} files scanned clean",
        per_series.len()
    ))
}

fn random_message(rng: &mut ChaCha8Rng) -> CoapMessage {
    let mtype = [MessageType::Con, MessageType::Non, MessageType::Ack, MessageType::Rst][rng.gen_range(0..4)];
    let token: Vec<u8> = (0..rng.gen_range(0..=8)).map(|_| rng.gen()).collect();
    let mut m = CoapMessage::new(mtype, Code(rng.gen()), rng.gen()).with_token(&token);
    for _ in 0..rng.gen_range(0..6) {
        let n = [OptionNumber::Observe, OptionNumber::UriPath, OptionNumber::ContentFormat, OptionNumber::UriQuery]
            [rng.gen_range(0..4)];
        // lengths spanning the 1-byte and 2-byte extended encodings
        let len = match rng.gen_range(0..4) {
            0 => rng.gen_range(0..13),
            1 => rng.gen_range(13..269),
            2 => rng.gen_range(269..600),
            _ => 0,
        };
        m.add_option(n, (0..len).map(|_| rng.gen()).collect());
    }
    let plen = rng.gen_range(0..200);
    m.with_payload((0..plen).map(|_| rng.gen()).collect::<Vec<u8>>())
}

fn coap_codec() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0A9);
    for i in 0..10_000 {
        let m = random_message(&mut rng);
        let bytes = encode(&m).map_err(|e| format!("message {i}: encode {e}"))?;
        let back = decode(&bytes).map_err(|e| format!("message {i}: decode {e}"))?;
        ensure!(back == m, "message {i} changed in round trip");
        ensure!(encode(&back).unwrap() == bytes, "message {i} re-encodes differently");
    }
    let mut accepted = 0;
    for i in 0..10_000 {
        let len = rng.gen_range(0..256);
        let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        match catch_unwind(|| decode(&bytes)) {
            Ok(Ok(_)) => accepted += 1,
            Ok(Err(_)) => {}
            Err(_) => return Err(format!("decode panicked on fuzz input {i}")),
        }
    }
    Ok(format!("10000 round trips bit-exact, 10000 fuzz inputs decoded without panic ({accepted} accepted)"))
}

fn pair(seed: u8) -> (SecureSession, SecureSession) {
    let id = PskIdentity::new("egg-001", &[seed; 16]).unwrap();
    let mut keys = KeyTable::new();
    keys.insert(&id);
    handshake([seed; 32], &id, &keys, [seed ^ 0xFF; 32], [seed; 8]).unwrap()
}

fn secure_transport() -> Verdict {
    let server_id = PskIdentity::new("egg-001", &[1; 16]).unwrap();
    let mut keys = KeyTable::new();
    keys.insert(&server_id);
    let wrong = PskIdentity::new("egg-001", &[2; 16]).unwrap();
    let r = handshake([3; 32], &wrong, &keys, [4; 32], [5; 8]);
    ensure!(matches!(r, Err(PskError::AuthFailure)), "wrong PSK gave {r:?}");

    let (mut c, mut s) = pair(9);
    let record = c.seal(b"</3303/0/5700>;v=21.5").unwrap();
    let mut tampered = 0;
    for bit in 0..record.len() * 8 {
        let mut t = record.clone();
        t[bit / 8] ^= 1 << (bit % 8);
        ensure!(s.open(&t).is_err(), "flipping bit {bit} was accepted");
        tampered += 1;
    }
    ensure!(s.open(&record).is_ok(), "original rejected after tamper attempts");

    // duplicated and reordered schedules never deliver a record twice
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut schedules = 0;
    for _ in 0..200 {
        let (mut c, mut s) = pair(rng.gen());
        let n = rng.gen_range(1..120);
        let records: Vec<(usize, Vec<u8>)> = (0..n).map(|i| (i, c.seal(&(i as u32).to_be_bytes()).unwrap())).collect();
        let mut schedule: Vec<&(usize, Vec<u8>)> = records.iter().collect();
        for _ in 0..rng.gen_range(0..n) {
            schedule.push(&records[rng.gen_range(0..n)]);
        }
        // bounded reordering
        for i in 0..schedule.len() {
            let j = (i + rng.gen_range(0..8)).min(schedule.len() - 1);
            schedule.swap(i, j);
        }
        let mut seen = BTreeSet::new();
        for (i, rec) in schedule {
            if let Ok(p) = s.open(rec) {
                let got = u32::from_be_bytes(p[..4].try_into().unwrap()) as usize;
                ensure!(got == *i, "payload mix-up");
                ensure!(seen.insert(got), "record {got} delivered twice");
            }
        }
        schedules += 1;
    }

    let (mut c, mut s) = pair(42);
    let payload = [0x5Au8; 64];
    let n = 50_000;
    let t = Instant::now();
    for _ in 0..n {
        let rec = c.seal(&payload).unwrap();
        s.open(&rec).unwrap();
    }
    let rate = n as f64 / t.elapsed().as_secs_f64();
    ensure!(rate >= 10_000.0, "{rate:.0} seal/open per second");
    Ok(format!(
        "wrong PSK refused, {tampered}/{tampered} single-bit tampers rejected, {schedules} dup/reorder schedules without double delivery, {rate:.0} cycles/s"
    ))
}

const SERVER: SocketAddr = SocketAddr::new(std::net::IpAddr::V4(std::net::Ipv4Addr::new(10, 0, 0, 1)), 5683);
const DEVICE: SocketAddr = SocketAddr::new(std::net::IpAddr::V4(std::net::Ipv4Addr::new(10, 0, 0, 2)), 5683);

struct Link {
    server: Lwm2mServer,
    sm: Messenger,
    client: Lwm2mClient,
    cm: Messenger,
    events: Vec<(Timestamp, ServerEvent)>,
    now: Timestamp,
}

impl Link {
    fn new() -> Link {
        let mut model = ObjectModel::new();
        model.define(LwPath::resource(3303, 0, 5700), Operations::R, Some(ResourceValue::Float(21.0)));
        Link {
            server: Lwm2mServer::new(),
            sm: Messenger::new(RetransmitParams::default(), 1),
            client: Lwm2mClient::new("egg-042", 300, model, SERVER, "1.0.0"),
            cm: Messenger::new(RetransmitParams::default(), 2),
            events: Vec::new(),
            now: Timestamp::ZERO,
        }
    }

    fn settle(&mut self) {
        loop {
            let mut moved = false;
            while let Some((_, b)) = self.cm.poll_transmit() {
                self.sm.handle_datagram(DEVICE, &b, self.now);
                moved = true;
            }
            while let Some(ev) = self.sm.poll_event() {
                if let ExchangeEvent::Request { peer, msg } = ev {
                    for e in self.server.handle_request(peer, &msg, self.now, &mut self.sm).into_iter().flatten() {
                        self.events.push((self.now, e));
                    }
                }
            }
            while let Some((_, b)) = self.sm.poll_transmit() {
                self.cm.handle_datagram(SERVER, &b, self.now);
                moved = true;
            }
            while let Some(ev) = self.cm.poll_event() {
                if let ExchangeEvent::Response { token, msg, .. } = ev {
                    self.client.handle_response(&token, &msg, self.now);
                }
            }
            if !moved {
                break;
            }
        }
    }

    /// Steps client timers and the server's expiry check once per second.
    fn run_until(&mut self, until: Timestamp) {
        while self.now < until {
            let next = Timestamp((self.now.0 / 1000 + 1) * 1000);
            let t = self.client.poll_timeout().map_or(next, |c| c.min(next)).min(until);
            self.now = t;
            self.client.handle_timeout(t, &mut self.cm);
            self.settle();
            for e in self.server.expire(t) {
                self.events.push((t, e));
            }
        }
    }

    fn expiries(&self) -> Vec<Timestamp> {
        self.events
            .iter()
            .filter(|(_, e)| matches!(e, ServerEvent::Deregistered { reason: DeregReason::Expired, .. }))
            .map(|(t, _)| *t)
            .collect()
    }
}

fn registration_lifecycle() -> Verdict {
    let mut silent = Link::new();
    silent.client.register(silent.now, &mut silent.cm);
    silent.settle();
    ensure!(silent.server.registry.len() == 1, "registration failed");
    silent.client.reset();
    silent.run_until(Timestamp(600_000));
    let exp = silent.expiries();
    ensure!(exp == vec![Timestamp(300_000)], "expiry events at {exp:?}");

    let mut live = Link::new();
    live.client.register(live.now, &mut live.cm);
    live.settle();
    live.run_until(Timestamp(3_600_000));
    ensure!(live.expiries().is_empty(), "refreshed registration expired");
    ensure!(live.server.registry.len() == 1, "refreshed registration lost");
    let updates = live
        .events
        .iter()
        .filter(|(_, e)| matches!(e, ServerEvent::Updated { .. }))
        .count();
    Ok(format!("silent client deregistered at t=300.000 s exactly; refreshed client alive at 1 h after {updates} updates"))
}

fn fota_fleet(n: usize) -> (tempfile::TempDir, makesense::sim::Testbed<makesense::backend::Backend>) {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = ScenarioSpec::office(n, 31);
    sc.duration_s = 3600.0;
    let mut tb = virtual_testbed(&sc, &FaultPlan::default(), dir.path()).unwrap();
    tb.run_for(Duration::from_secs(10));
    (dir, tb)
}

fn fota() -> Verdict {
    let image = |v: &str, len: usize| build_image(&vec![0x3C; len], v).unwrap().to_bytes();

    let (_d, mut tb) = fota_fleet(5);
    let v = tb.backend.add_image(&image("1.1.0", 6000)).map_err(|e| e.to_string())?;
    tb.with_backend(|b, now| b.fota_push(&v, None, now)).map_err(|e| e.to_string())?;
    tb.run_for(Duration::from_secs(300));
    let results: Vec<_> = tb.backend.fota_progress().into_iter().map(|p| p.result).collect();
    ensure!(results.iter().all(|r| *r == Some(PushResult::Success)), "valid push: {results:?}");
    ensure!(tb.devices.iter().all(|d| d.fw_version() == "1.1.0" && d.is_registered()), "devices not on 1.1.0");
    let reported: Vec<_> = tb.backend.devices().into_iter().map(|d| d.fw_version).collect();
    ensure!(reported.iter().all(|v| v.as_deref() == Some("1.1.0")), "re-registered versions {reported:?}");

    let (dir, mut tb) = fota_fleet(5);
    let v = tb.backend.add_image(&image("1.2.0", 6000)).map_err(|e| e.to_string())?;
    let path = dir.path().join("images").join(format!("{v}.img"));
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[3000] ^= 0x01;
    std::fs::write(&path, bytes).unwrap();
    tb.with_backend(|b, now| b.fota_push(&v, None, now)).map_err(|e| e.to_string())?;
    tb.run_for(Duration::from_secs(300));
    let results: Vec<_> = tb.backend.fota_progress().into_iter().map(|p| p.result).collect();
    ensure!(results.iter().all(|r| *r == Some(PushResult::IntegrityFailure)), "corrupt push: {results:?}");
    ensure!(tb.devices.iter().all(|d| d.fw_version() == "1.0.0"), "corrupt image changed a version");

    let (_d, mut tb) = fota_fleet(1);
    let v = tb.backend.add_image(&image("2.0.0", 40_000)).map_err(|e| e.to_string())?;
    tb.with_backend(|b, now| b.fota_push(&v, None, now)).map_err(|e| e.to_string())?;
    tb.run_for(Duration::from_secs(3));
    let got = tb.devices[0].fota().downloaded_bytes();
    ensure!(got > 0 && got < 40_000, "crash not mid-download ({got} bytes)");
    tb.with_device(0, |d, now| d.crash(now, Duration::from_secs(5)));
    tb.run_for(Duration::from_secs(120));
    ensure!(tb.devices[0].fw_version() == "1.0.0", "crashed device changed version");
    ensure!(tb.devices[0].is_registered(), "crashed device did not come back");
    Ok(format!("5/5 updated and re-registered, 5/5 INTEGRITY_FAILURE on corruption, crash at {got} B kept 1.0.0"))
}

enum Step {
    Reading(SensorReading),
    Monitoring(String, bool),
}

/// Independent evaluator: for each reading, looks backwards through the
/// whole trace instead of keeping running state.
fn brute_force(steps: &[Step], prefs: &HashMap<String, ComfortPreference>, desk_of: &HashMap<String, String>, cfg: &ComfortConfig) -> Vec<(String, Variable, f64, f64, Timestamp)> {
    let var_of = |obj: u16| match obj {
        3303 => Some(Variable::Temperature),
        3304 => Some(Variable::Humidity),
        3301 => Some(Variable::Light),
        3325 => Some(Variable::Dust),
        _ => None,
    };
    let tol = |v: Variable| match v {
        Variable::Temperature => cfg.tolerance[0],
        Variable::Humidity => cfg.tolerance[1],
        Variable::Light => cfg.tolerance[2],
        Variable::Dust => cfg.tolerance[3],
    };
    let target = |p: &ComfortPreference, v: Variable| match v {
        Variable::Temperature => p.temperature,
        Variable::Humidity => p.humidity,
        Variable::Light => p.light,
        Variable::Dust => p.dust,
    };
    // is reading k of (desk, var) a deviation while occupied and monitored?
    let hot = |k: usize| -> bool {
        let Step::Reading(r) = &steps[k] else { return false };
        let desk = &desk_of[&r.endpoint];
        let Some(v) = var_of(r.object_id) else { return false };
        let monitoring = steps[..k]
            .iter()
            .rev()
            .find_map(|s| match s {
                Step::Monitoring(d, on) if d == desk => Some(*on),
                _ => None,
            })
            .unwrap_or(false);
        let Some(t) = target(&prefs[desk], v) else { return false };
        let prox = steps[..k].iter().rev().find_map(|s| match s {
            Step::Reading(p) if p.object_id == 3330 && desk_of[&p.endpoint] == *desk => Some(p),
            _ => None,
        });
        let occupied = prox.is_some_and(|p| {
            p.value < 75.0 && r.server_time >= p.server_time && r.server_time.0 - p.server_time.0 <= cfg.freshness.as_millis() as i64
        });
        monitoring && occupied && (r.value - t).abs() > tol(v)
    };
    let mut fired: Vec<(String, Variable, f64, f64, Timestamp)> = Vec::new();
    for k in 0..steps.len() {
        let Step::Reading(r) = &steps[k] else { continue };
        let Some(v) = var_of(r.object_id) else { continue };
        if !hot(k) {
            continue;
        }
        let desk = desk_of[&r.endpoint].clone();
        // consecutive hot readings of this desk and variable, with no
        // monitoring change for the desk in between
        let mut streak = 1;
        for j in (0..k).rev() {
            match &steps[j] {
                Step::Monitoring(d, _) if *d == desk => break,
                Step::Reading(p) if desk_of[&p.endpoint] == desk && var_of(p.object_id) == Some(v) => {
                    if hot(j) {
                        streak += 1;
                    } else {
                        break;
                    }
                }
                _ => {}
            }
        }
        let last = fired.iter().rev().find(|e| e.0 == desk && e.1 == v).map(|e| e.4);
        let cooled = last.is_none_or(|t| r.server_time.0 - t.0 >= cfg.cooldown.as_millis() as i64);
        if streak >= cfg.debounce && cooled {
            fired.push((desk, v, r.value, target(&prefs[&desk_of[&r.endpoint]], v).unwrap(), r.server_time));
        }
    }
    fired
}

fn reading(ep: &str, obj: u16, v: f64, t: Timestamp) -> SensorReading {
    SensorReading {
        pseudonym: "p".into(),
        endpoint: ep.into(),
        object_id: obj,
        instance: 0,
        resource: 5700,
        value: v,
        unit: String::new(),
        device_time: t,
        server_time: t,
        site: "s".into(),
    }
}

fn comfort_oracle() -> Verdict {
    let cfg = ComfortConfig::default();
    let desks = ["desk-1", "desk-2", "desk-3"];
    let mut engine = ComfortEngine::new(cfg.clone()).unwrap();
    let mut desk_of = HashMap::new();
    let mut prefs = HashMap::new();
    for (i, d) in desks.iter().enumerate() {
        let ep = format!("site-egg-{i}");
        engine.assign_desk(d, &ep);
        desk_of.insert(ep, d.to_string());
        let p = ComfortPreference {
            temperature: Some(21.0),
            humidity: Some(45.0),
            light: if i == 2 { None } else { Some(400.0) },
            dust: Some(20.0),
            email: "x@example.org".into(),
            ..ComfortPreference::new(*d)
        };
        engine.set_preference(p.clone()).unwrap();
        prefs.insert(d.to_string(), p);
    }

    // 1 h at 1 s: drifting values, a person who comes and goes, monitoring
    // switched on and off
    let mut rng = ChaCha8Rng::seed_from_u64(75);
    let mut steps = Vec::new();
    let start = Timestamp(1_700_000_000_000);
    for (i, d) in desks.iter().enumerate() {
        if i != 1 {
            steps.push(Step::Monitoring(d.to_string(), true));
        }
    }
    let mut prox = [120.0f64; 3];
    for s in 0..3600i64 {
        let t = start + Duration::from_secs(s as u64);
        if s == 900 {
            steps.push(Step::Monitoring("desk-2".into(), true));
        }
        if s == 2400 {
            steps.push(Step::Monitoring("desk-1".into(), false));
        }
        if s == 3000 {
            steps.push(Step::Monitoring("desk-1".into(), true));
        }
        for i in 0..3 {
            let ep = format!("site-egg-{i}");
            if rng.gen_bool(0.02) {
                prox[i] = [40.0, 74.9, 75.0, 75.1, 140.0][rng.gen_range(0..5)];
            }
            // some proximity samples go missing, so occupancy goes stale
            if rng.gen_bool(0.9) {
                steps.push(Step::Reading(reading(&ep, 3330, prox[i], t)));
            }
            let phase = s as f64 / 600.0 + i as f64;
            let temp = 21.0 + 3.0 * phase.sin() + rng.gen_range(-0.5..0.5);
            let hum = 45.0 + 15.0 * (phase * 0.7).cos() + rng.gen_range(-2.0..2.0);
            let lux = 400.0 + 150.0 * (phase * 1.3).sin() + rng.gen_range(-20.0..20.0);
            let dust = 20.0 + 12.0 * (phase * 0.4).sin() + rng.gen_range(-3.0..3.0);
            for (obj, v) in [(3303, temp), (3304, hum), (3301, lux), (3325, dust)] {
                if rng.gen_bool(0.97) {
                    steps.push(Step::Reading(reading(&ep, obj, v, t)));
                }
            }
        }
    }
    let mut got = Vec::new();
    for st in &steps {
        match st {
            Step::Reading(r) => got.extend(engine.on_reading(r)),
            Step::Monitoring(d, on) => engine.set_monitoring(d, *on).unwrap(),
        }
    }
    let want = brute_force(&steps, &prefs, &desk_of, &cfg);
    let got_t: Vec<_> = got
        .iter()
        .map(|e: &ComfortEvent| (e.desk.clone(), e.variable, e.measured, e.target, e.fired_at))
        .collect();
    ensure!(!want.is_empty(), "trace produced no events");
    ensure!(got_t == want, "engine {} events, oracle {}; first difference at {:?}", got_t.len(), want.len(),
        got_t.iter().zip(&want).position(|(a, b)| a != b));

    // the 75 cm boundary itself
    let mut e = ComfortEngine::new(cfg.clone()).unwrap();
    e.assign_desk("desk-9", "ep9");
    let t = Timestamp(5_000);
    e.on_reading(&reading("ep9", 3330, 75.0, t));
    ensure!(!e.is_occupied("desk-9", t), "75 cm counted as occupied");
    e.on_reading(&reading("ep9", 3330, 74.999, t));
    ensure!(e.is_occupied("desk-9", t), "74.999 cm not occupied");
    Ok(format!("{} readings, {} events identical to brute force; 75 cm unoccupied", steps.len(), want.len()))
}

fn localization() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = ScenarioSpec::home(1, 5);
    sc.rssi_sigma_db = Some(2.0);
    let rooms = ["kitchen", "living", "bedroom", "bathroom", "hall"];
    let dwell = 120.0;
    sc.wristbands = vec![WristbandSpec {
        band: 1,
        site: "household-01".into(),
        person: Some("resident-01a".into()),
        schedule: (0..10)
            .map(|k| Stay {
                room: rooms[k % 5].into(),
                from_s: k as f64 * dwell,
                to_s: (k + 1) as f64 * dwell,
            })
            .collect(),
    }];
    sc.duration_s = 10.0 * dwell;
    sc.validate().map_err(|e| e.to_string())?;
    let env = Environment::from_scenario(&sc);
    let mut tb = virtual_testbed(&sc, &FaultPlan::default(), dir.path()).map_err(|e| e.to_string())?;
    let token = tb.backend.site_token("household-01").map_err(|e| e.to_string())?;
    // ground truth: the eggs standing in the band's room
    let mut in_room: HashMap<String, BTreeSet<String>> = HashMap::new();
    for d in sc.devices() {
        if d.site == "household-01" && d.endpoint.contains(".egg-") {
            let name = d.endpoint.split_once('.').unwrap().1;
            in_room.entry(d.room.clone()).or_default().insert(format!("{token}-{name}"));
        }
    }
    ensure!(in_room.len() == 5, "eggs cover {} rooms", in_room.len());
    let (mut hits, mut total) = (0, 0);
    let settle = 15;
    for k in 0..10 {
        let room_start = sc.start() + Duration::from_secs_f64(k as f64 * dwell);
        tb.run_until(room_start + Duration::from_secs(settle));
        for s in settle..dwell as u64 {
            let t = room_start + Duration::from_secs(s);
            tb.run_until(t);
            let truth = env.band_room("household-01", 1, t).unwrap();
            let est = tb.backend.presence(&token, 1, t);
            total += 1;
            if est.and_then(|e| e.nearest_egg).is_some_and(|e| in_room[truth].contains(&e)) {
                hits += 1;
            }
        }
    }
    let acc = hits as f64 / total as f64;
    ensure!(acc >= 0.90, "accuracy {:.1}% ({hits}/{total})", acc * 100.0);
    Ok(format!("{hits}/{total} nearest-egg estimates correct ({:.1}%) with sigma 2 dB", acc * 100.0))
}

fn quality() -> Verdict {
    let sc = ScenarioSpec::quality(8, 24);
    let window = Duration::from_secs(24 * 3600);
    let control = tempfile::tempdir().unwrap();
    let run = quality_run(&sc, &FaultPlan::default(), window, control.path()).map_err(|e| e.to_string())?;
    ensure!(run.eggs.len() == 8, "{} eggs", run.eggs.len());
    ensure!(run.report.flagged().is_empty(), "control flagged {:?}", run.report.flagged());
    let plan = FaultPlan::from_toml("[[bias]]\negg = \"egg-005\"\nsensor = 3303\ndelta = 2.0\n").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run = quality_run(&sc, &plan, window, dir.path()).map_err(|e| e.to_string())?;
    let flagged: Vec<String> = run.report.flagged().into_iter().collect();
    ensure!(flagged.len() == 1 && flagged[0].ends_with("-egg-005"), "flagged {flagged:?}");
    let biased_rows: Vec<_> = run.report.rows.iter().filter(|r| r.bias).map(|r| (r.egg.clone(), r.sensor)).collect();
    ensure!(biased_rows.len() == 1 && biased_rows[0].1 == 3303, "bias rows {biased_rows:?}");
    Ok(format!("24 h, {} samples per sensor: control 0 flags, biased run flags only egg-005 temperature", run.expected))
}

fn resilience(clean: u64) -> Verdict {
    let plan = FaultPlan::from_toml(
        "[[worker_crash]]\nworker = \"storage\"\nat_s = 181.3\n[[worker_crash]]\nworker = \"collector-ingest\"\nat_s = 402.7\n",
    )
    .unwrap();
    let (run, detail) = office_run(&plan)?;
    ensure!(detail.contains("restarts=2"), "expected two restarts: {detail}");
    ensure!(run.stored == clean, "stored {} with crashes, {clean} without", run.stored);
    Ok(format!("stored {} with and without crashes; {detail}", run.stored))
}

fn report(name: &str, check: impl FnOnce() -> Verdict) {
    let t = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(check));
    let secs = t.elapsed().as_secs_f64();
    let line = match &v {
        Ok(Ok(d)) => format!("PASS {name}: {d} [{secs:.1}s]"),
        Ok(Err(d)) => format!("FAIL {name}: {d} [{secs:.1}s]"),
        Err(_) => format!("FAIL {name}: panicked [{secs:.1}s]"),
    };
    println!("{line}");
    assert!(line.starts_with("PASS"), "{line}");
}

#[test]
fn office_scale() {
    report("office-scale", || office_run(&FaultPlan::default()).map(|(_, d)| d));
}

#[test]
fn home_scale_counts_and_privacy() {
    report("home-scale", home_scale);
}

#[test]
fn coap_codec_round_trip_and_fuzz() {
    report("coap-codec", coap_codec);
}

#[test]
fn secure_transport_properties() {
    report("secure-transport", secure_transport);
}

#[test]
fn registration_expiry() {
    report("registration-lifecycle", registration_lifecycle);
}

#[test]
fn fota_outcomes() {
    report("fota", fota);
}

#[test]
fn comfort_matches_brute_force() {
    report("comfort-oracle", comfort_oracle);
}

#[test]
fn localization_accuracy() {
    report("localization", localization);
}

#[test]
fn quality_24h() {
    report("quality-test", quality);
}

#[test]
fn worker_crashes_keep_stored_count() {
    report("resilience", || {
        let (clean, _) = office_run(&FaultPlan::default())?;
        resilience(clean.stored)
    });
}
