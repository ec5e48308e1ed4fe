use std::time::Duration;

use makesense::eggsim::{FaultPlan, ScenarioSpec};
use makesense::fota::build_image;
use makesense::fota::orchestrator::PushResult;
use makesense::sim::virtual_testbed;

fn fleet(n: usize) -> (tempfile::TempDir, makesense::sim::Testbed<makesense::backend::Backend>) {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = ScenarioSpec::office(n, 3);
    sc.duration_s = 3600.0;
    let mut tb = virtual_testbed(&sc, &FaultPlan::default(), dir.path()).unwrap();
    tb.run_for(Duration::from_secs(10));
    (dir, tb)
}

fn image(version: &str, len: usize) -> Vec<u8> {
    build_image(&vec![0xA5; len], version).unwrap().to_bytes()
}

#[test]
fn valid_image_updates_every_target() {
    let (_dir, mut tb) = fleet(3);
    let v = tb.backend.add_image(&image("1.1.0", 3000)).unwrap();
    let targets = tb.with_backend(|b, now| b.fota_push(&v, None, now)).unwrap();
    assert_eq!(targets.len(), 3);
    tb.run_for(Duration::from_secs(120));
    assert!(tb.backend.orchestrator().is_done());
    for p in tb.backend.fota_progress() {
        assert_eq!(p.result, Some(PushResult::Success), "{p:?}");
    }
    for d in &tb.devices {
        assert_eq!(d.fw_version(), "1.1.0");
        assert!(d.is_registered());
    }
    for info in tb.backend.devices() {
        assert_eq!(info.fw_version.as_deref(), Some("1.1.0"));
    }
}

#[test]
fn corrupted_image_fails_integrity_everywhere() {
    let (dir, mut tb) = fleet(3);
    let v = tb.backend.add_image(&image("1.2.0", 3000)).unwrap();
    let path = dir.path().join("images").join(format!("{v}.img"));
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[1500] ^= 0x10;
    std::fs::write(&path, bytes).unwrap();
    tb.with_backend(|b, now| b.fota_push(&v, None, now)).unwrap();
    tb.run_for(Duration::from_secs(120));
    for p in tb.backend.fota_progress() {
        assert_eq!(p.result, Some(PushResult::IntegrityFailure), "{p:?}");
    }
    for d in &tb.devices {
        assert_eq!(d.fw_version(), "1.0.0");
    }
}

#[test]
fn crash_mid_download_keeps_old_version() {
    let (_dir, mut tb) = fleet(1);
    let v = tb.backend.add_image(&image("2.0.0", 40_000)).unwrap();
    tb.with_backend(|b, now| b.fota_push(&v, None, now)).unwrap();
    tb.run_for(Duration::from_secs(3));
    let got = tb.devices[0].fota().downloaded_bytes();
    assert!(got > 0 && got < 40_000, "{got}");
    tb.with_device(0, |d, now| d.crash(now, Duration::from_secs(5)));
    tb.run_for(Duration::from_secs(120));
    assert_eq!(tb.devices[0].fw_version(), "1.0.0");
    assert!(tb.devices[0].is_registered());
    let p = &tb.backend.fota_progress()[0];
    assert_eq!(p.result, Some(PushResult::ConnectionLost), "{p:?}");
}
