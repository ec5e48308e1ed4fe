use std::time::Duration;

use makesense::datastore::Query;
use makesense::eggsim::{FaultPlan, ScenarioSpec};
use makesense::sim::virtual_testbed;

#[test]
fn office_fleet_registers_and_stores() {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = ScenarioSpec::office(4, 7);
    sc.duration_s = 60.0;
    let mut tb = virtual_testbed(&sc, &FaultPlan::default(), dir.path()).unwrap();
    tb.run_until(sc.end());

    assert!(tb.devices.iter().all(|d| d.is_registered()));
    let m = tb.backend.metrics();
    assert_eq!(m.registered, 4);
    assert!(m.stored > 0, "{m:?}");
    assert_eq!(m.stored + m.deduped, m.storage_received);
    assert_eq!(m.readings_published, m.live_pushed);

    let generated: u64 = tb
        .devices
        .iter()
        .map(|d| d.stats().generated.values().sum::<u64>())
        .sum();
    // readings still in flight at the cut-off are not counted yet
    assert!(m.stored as f64 >= 0.95 * generated as f64, "stored {} of {generated}", m.stored);
    assert!(m.stored <= generated);

    let devs = tb.backend.devices();
    assert_eq!(devs.len(), 4);
    for d in &devs {
        assert!(!d.endpoint.contains("egg-00") || d.endpoint.split('-').count() == 3);
        assert!(!d.observed.is_empty());
    }
    let temp = tb
        .backend
        .query(&Query {
            object_id: Some(3303),
            ..Query::range(sc.start(), sc.end())
        })
        .unwrap()
        .readings();
    assert!(!temp.is_empty());
    for r in &temp {
        assert!((15.0..30.0).contains(&r.value), "{}", r.value);
        assert_ne!(r.site, "office");
    }
}

#[test]
fn deterministic_digest() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut sc = ScenarioSpec::office(2, 11);
        sc.duration_s = 20.0;
        let mut tb = virtual_testbed(&sc, &FaultPlan::default(), dir.path()).unwrap();
        tb.run_for(Duration::from_secs(20));
        tb.digest()
    };
    assert_eq!(run(), run());
}

fn stored_after(plan: &FaultPlan) -> (u64, u64) {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = ScenarioSpec::office(6, 5);
    sc.duration_s = 40.0;
    let mut tb = virtual_testbed(&sc, plan, dir.path()).unwrap();
    tb.run_until(sc.end());
    let m = tb.backend.metrics();
    assert_eq!(m.stored, m.storage_received - m.deduped);
    (m.stored, m.worker_restarts)
}

#[test]
fn worker_crashes_do_not_change_stored_count() {
    let (clean, restarts) = stored_after(&FaultPlan::default());
    assert_eq!(restarts, 0);
    let plan = FaultPlan::from_toml(
        r#"
        [[worker_crash]]
        worker = "storage"
        at_s = 12.0
        [[worker_crash]]
        worker = "collector-ingest"
        at_s = 21.5
        "#,
    )
    .unwrap();
    let (faulty, restarts) = stored_after(&plan);
    assert_eq!(restarts, 2);
    assert_eq!(clean, faulty);
}

#[test]
fn home_counts_are_exact_per_series() {
    use std::collections::BTreeMap;
    let dir = tempfile::tempdir().unwrap();
    let mut sc = ScenarioSpec::home(2, 9);
    let warmup = Duration::from_secs(30);
    let window = Duration::from_secs(120);
    sc.duration_s = (warmup + window).as_secs_f64() + 10.0;
    let mut tb = virtual_testbed(&sc, &FaultPlan::default(), dir.path()).unwrap();
    tb.run_until(sc.end());
    let t0 = sc.start() + warmup;
    let t1 = t0 + window;
    let mut counts: BTreeMap<(String, u16, u16), u64> = BTreeMap::new();
    for r in tb.backend.store().all().unwrap() {
        if r.device_time >= t0 && r.device_time < t1 {
            *counts.entry((r.endpoint, r.object_id, r.instance)).or_default() += 1;
        }
    }
    let eggs: usize = sc.egg_counts().iter().sum();
    let hubs = sc.sites.len();
    assert_eq!(tb.backend.metrics().registered, eggs + hubs);
    assert!(!counts.is_empty());
    for ((ep, obj, _), n) in &counts {
        let interval = if *obj == 3305 { sc.energy_interval() } else { sc.sample_interval() };
        let want = window.as_millis() / interval.as_millis();
        assert_eq!(*n as u128, want, "{ep} /{obj}");
    }

    let raw = sc.raw_identifiers();
    for f in walk(dir.path()) {
        if f.file_name().unwrap() == "pseudonyms.tsv" {
            continue;
        }
        let text = String::from_utf8_lossy(&std::fs::read(&f).unwrap()).into_owned();
        for id in &raw {
            assert!(!text.contains(id.as_str()), "{id} in {}", f.display());
        }
    }
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
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

#[test]
fn quality_run_flags_only_the_biased_egg() {
    use makesense::sim::quality::quality_run;
    let sc = ScenarioSpec::quality(8, 21);
    let window = Duration::from_secs(1800);
    let control = tempfile::tempdir().unwrap();
    let run = quality_run(&sc, &FaultPlan::default(), window, control.path()).unwrap();
    assert_eq!(run.eggs.len(), 8);
    assert!(run.report.flagged().is_empty(), "{:?}", run.report.flagged());

    let plan = FaultPlan::from_toml("[[bias]]\negg = \"egg-003\"\nsensor = 3303\ndelta = 2.0\n").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run = quality_run(&sc, &plan, window, dir.path()).unwrap();
    let flagged: Vec<String> = run.report.flagged().into_iter().collect();
    assert_eq!(flagged.len(), 1);
    assert!(flagged[0].ends_with("-egg-003"), "{flagged:?}");
    for row in &run.report.rows {
        assert_eq!(row.count, run.expected, "{row:?}");
    }
}
