use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::scalar::Scalar;

pub const DAY_MS: i64 = 86_400_000;
pub const DEFAULT_PROXIMITY_CLAMP_CM: f64 = 150.0;

/// FNV-1a over length-delimited parts; stable across runs and platforms.
pub fn noise_key(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for &b in (p.len() as u32).to_le_bytes().iter().chain(p.iter()) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Standard normal deviate determined by `key`.
pub fn gaussian<S: Scalar>(key: u64) -> S {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    S::of(rng.sample::<f64, _>(StandardNormal))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorProfile<S: Scalar> {
    pub baseline: S,
    pub amplitude: S,
    pub sigma: S,
    pub min: S,
    pub max: S,
}

impl<S: Scalar> SensorProfile<S> {
    pub fn new(baseline: f64, amplitude: f64, sigma: f64, min: f64, max: f64) -> Self {
        SensorProfile {
            baseline: S::of(baseline),
            amplitude: S::of(amplitude),
            sigma: S::of(sigma),
            min: S::of(min),
            max: S::of(max),
        }
    }

    pub fn clamp(&self, v: S) -> S {
        v.max(self.min).min(self.max)
    }
}

/// Built-in ranges for the catalog sensors.
pub fn default_profile<S: Scalar>(sensor: u16, proximity_clamp_cm: f64) -> SensorProfile<S> {
    match sensor {
        3303 => SensorProfile::new(21.0, 2.0, 0.2, -20.0, 60.0),
        3304 => SensorProfile::new(45.0, 5.0, 1.0, 0.0, 100.0),
        3301 => SensorProfile::new(300.0, 250.0, 10.0, 0.0, 4000.0),
        3324 => SensorProfile::new(38.0, 6.0, 2.0, 0.0, 130.0),
        3325 => SensorProfile::new(20.0, 4.0, 1.5, 0.0, 1000.0),
        3330 => SensorProfile::new(proximity_clamp_cm, 0.0, 0.0, 10.0, proximity_clamp_cm),
        3348 => SensorProfile::new(0.0, 0.0, 0.0, 0.0, 255.0),
        _ => SensorProfile::new(0.0, 0.0, 0.0, f64::MIN, f64::MAX),
    }
}

/// A timed change to one sensor in a room or on one egg: either an added
/// pulse (`delta`) or an override (`value`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    #[serde(default)]
    pub site: Option<String>,
    #[serde(default)]
    pub room: Option<String>,
    #[serde(default)]
    pub egg: Option<String>,
    pub sensor: u16,
    pub from_s: f64,
    pub to_s: f64,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub value: Option<f64>,
}

impl Episode {
    fn applies(&self, site: &str, room: &str, egg: &str, rel_s: f64) -> bool {
        rel_s >= self.from_s
            && rel_s < self.to_s
            && self.site.as_deref().is_none_or(|s| s == site)
            && self.room.as_deref().is_none_or(|r| r == room)
            && self.egg.as_deref().is_none_or(|e| e == egg)
    }
}

/// Where a sample is taken.
#[derive(Clone, Copy, Debug)]
pub struct Place<'a> {
    pub site: &'a str,
    pub room: &'a str,
    pub egg: &'a str,
}

/// Deterministic sensor traces: baseline + daily sinusoid + seeded noise +
/// episodes, clamped.
#[derive(Clone, Debug)]
pub struct SignalModel<S: Scalar> {
    pub seed: u64,
    pub start: Timestamp,
    pub profiles: BTreeMap<u16, SensorProfile<S>>,
    pub episodes: Vec<Episode>,
    /// Per-device noise on top of the shared room noise.
    pub device_sigma: S,
    pub proximity_clamp_cm: f64,
}

impl<S: Scalar> SignalModel<S> {
    pub fn new(seed: u64, start: Timestamp) -> Self {
        SignalModel {
            seed,
            start,
            profiles: BTreeMap::new(),
            episodes: Vec::new(),
            device_sigma: S::zero(),
            proximity_clamp_cm: DEFAULT_PROXIMITY_CLAMP_CM,
        }
    }

    pub fn profile(&self, sensor: u16) -> SensorProfile<S> {
        self.profiles
            .get(&sensor)
            .copied()
            .unwrap_or_else(|| default_profile(sensor, self.proximity_clamp_cm))
    }

    pub fn sample(&self, sensor: u16, at: Place<'_>, t: Timestamp) -> S {
        let p = self.profile(sensor);
        let tod = S::of(t.millis_of_day() as f64 / DAY_MS as f64);
        let mut v = p.baseline + p.amplitude * (S::of(2.0 * PI) * tod).sin();
        let ms = t.0.to_le_bytes();
        let sens = sensor.to_le_bytes();
        let seed = self.seed.to_le_bytes();
        if p.sigma > S::zero() {
            let k = noise_key(&[&seed, at.site.as_bytes(), at.room.as_bytes(), &sens, &ms]);
            v = v + p.sigma * gaussian::<S>(k);
        }
        if self.device_sigma > S::zero() {
            let k = noise_key(&[&seed, b"device", at.egg.as_bytes(), &sens, &ms]);
            v = v + self.device_sigma * gaussian::<S>(k);
        }
        let rel_s = (t.0 - self.start.0) as f64 / 1000.0;
        for e in &self.episodes {
            if e.sensor == sensor && e.applies(at.site, at.room, at.egg, rel_s) {
                if let Some(val) = e.value {
                    v = S::of(val);
                }
                if let Some(d) = e.delta {
                    v = v + S::of(d);
                }
            }
        }
        p.clamp(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const AT: Place<'static> = Place {
        site: "s",
        room: "r",
        egg: "e",
    };

    fn quiet(sensor: u16, baseline: f64, amp: f64) -> SignalModel<f64> {
        let mut m = SignalModel::new(1, Timestamp(0));
        m.profiles
            .insert(sensor, SensorProfile::new(baseline, amp, 0.0, 0.0, 100.0));
        m
    }

    #[test]
    fn quarter_day_peak() {
        let m = quiet(3303, 21.0, 2.0);
        let v = m.sample(3303, AT, Timestamp(6 * 3_600_000));
        approx::assert_abs_diff_eq!(v, 23.0, epsilon = 1e-12);
    }

    #[test]
    fn proximity_rests_at_clamp() {
        let mut m = SignalModel::<f64>::new(1, Timestamp(0));
        m.proximity_clamp_cm = 80.0;
        assert_eq!(m.sample(3330, AT, Timestamp(1234)), 80.0);
    }

    #[test]
    fn humidity_clamped() {
        let mut m = quiet(3304, 95.0, 0.0);
        m.episodes.push(Episode {
            site: None,
            room: None,
            egg: None,
            sensor: 3304,
            from_s: 0.0,
            to_s: 10.0,
            delta: Some(30.0),
            value: None,
        });
        assert_eq!(m.sample(3304, AT, Timestamp(5000)), 100.0);
        assert_eq!(m.sample(3304, AT, Timestamp(10_000)), 95.0);
    }

    #[test]
    fn deterministic_and_room_shared() {
        let m = SignalModel::<f64>::new(7, Timestamp(0));
        let a = m.sample(3303, AT, Timestamp(99_000));
        let b = m.sample(3303, Place { egg: "other", ..AT }, Timestamp(99_000));
        assert_eq!(a, b);
        let c = m.sample(3303, Place { room: "r2", ..AT }, Timestamp(99_000));
        assert_ne!(a, c);
    }

    #[test]
    fn f32_tracks_f64() {
        let a = SignalModel::<f64>::new(3, Timestamp(0)).sample(3304, AT, Timestamp(5_000_000));
        let b = SignalModel::<f32>::new(3, Timestamp(0)).sample(3304, AT, Timestamp(5_000_000));
        approx::assert_abs_diff_eq!(a, b as f64, epsilon = 1e-3);
    }
}
