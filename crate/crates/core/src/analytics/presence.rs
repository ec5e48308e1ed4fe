use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use serde::Serialize;

use super::stats::Ewma;
use crate::clock::Timestamp;
use crate::reading::SensorReading;
use crate::scalar::Scalar;

pub const PRESENCE_ALPHA: f64 = 0.3;
pub const PRESENCE_THRESHOLD_DBM: f64 = -85.0;
pub const PRESENCE_STALE_AFTER: Duration = Duration::from_secs(30);

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PresenceEstimate<S: Scalar> {
    pub band_id: u16,
    pub nearest_egg: Option<String>,
    pub smoothed: BTreeMap<String, S>,
    pub present: bool,
}

#[derive(Debug)]
struct EggTrack<S: Scalar> {
    ewma: Ewma<S>,
    last_seen: Timestamp,
}

/// Per-band RSSI smoothing and nearest-egg selection. Eggs that have not
/// heard the band for [`PRESENCE_STALE_AFTER`] drop out of the estimate.
#[derive(Debug)]
pub struct PresenceTracker<S: Scalar> {
    alpha: S,
    threshold: S,
    stale_after: Duration,
    bands: HashMap<u16, BTreeMap<String, EggTrack<S>>>,
}

impl<S: Scalar> Default for PresenceTracker<S> {
    fn default() -> Self {
        PresenceTracker::new(S::of(PRESENCE_ALPHA), S::of(PRESENCE_THRESHOLD_DBM))
    }
}

impl<S: Scalar> PresenceTracker<S> {
    pub fn new(alpha: S, threshold: S) -> Self {
        PresenceTracker {
            alpha,
            threshold,
            stale_after: PRESENCE_STALE_AFTER,
            bands: HashMap::new(),
        }
    }

    pub fn with_stale_after(mut self, d: Duration) -> Self {
        self.stale_after = d;
        self
    }

    pub fn update(&mut self, band_id: u16, egg: &str, rssi: S, at: Timestamp) -> PresenceEstimate<S> {
        let eggs = self.bands.entry(band_id).or_default();
        let track = eggs.entry(egg.to_string()).or_insert_with(|| EggTrack {
            ewma: Ewma::new(self.alpha),
            last_seen: at,
        });
        track.ewma.update(rssi);
        track.last_seen = track.last_seen.max(at);
        self.estimate(band_id, at)
    }

    /// Feeds a wristband reading: instance = band, endpoint = egg.
    pub fn update_reading(&mut self, r: &SensorReading) -> PresenceEstimate<S> {
        self.update(r.instance, &r.endpoint, S::of(r.value), r.device_time)
    }

    pub fn estimate(&self, band_id: u16, now: Timestamp) -> PresenceEstimate<S> {
        let mut smoothed = BTreeMap::new();
        if let Some(eggs) = self.bands.get(&band_id) {
            for (egg, t) in eggs {
                if now.saturating_sub(t.last_seen) <= self.stale_after {
                    if let Some(v) = t.ewma.value() {
                        smoothed.insert(egg.clone(), v);
                    }
                }
            }
        }
        let best = smoothed
            .iter()
            .fold(None::<(&String, S)>, |acc, (e, &v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((e, v)),
            });
        let present = best.is_some_and(|(_, v)| v > self.threshold);
        PresenceEstimate {
            band_id,
            nearest_egg: best.filter(|_| present).map(|(e, _)| e.clone()),
            smoothed,
            present,
        }
    }

    pub fn bands(&self) -> Vec<u16> {
        let mut v: Vec<u16> = self.bands.keys().copied().collect();
        v.sort();
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_egg_is_nearest() {
        let mut p = PresenceTracker::<f64>::default();
        let e = p.update(1, "egg-a", -80.0, Timestamp(0));
        assert!(e.present);
        assert_eq!(e.nearest_egg.as_deref(), Some("egg-a"));
    }

    #[test]
    fn argmax_of_two() {
        let mut p = PresenceTracker::<f32>::default();
        p.update(1, "a", -50.0, Timestamp(0));
        let e = p.update(1, "b", -70.0, Timestamp(0));
        assert_eq!(e.nearest_egg.as_deref(), Some("a"));
    }

    #[test]
    fn weak_signal_is_absent() {
        let mut p = PresenceTracker::<f64>::default();
        let e = p.update(1, "a", -85.0, Timestamp(0));
        assert!(!e.present);
        assert_eq!(e.nearest_egg, None);
    }

    #[test]
    fn common_offset_keeps_argmax() {
        let samples = [("a", -60.0), ("b", -66.0), ("c", -58.0), ("a", -59.0), ("b", -71.0)];
        let mut p = PresenceTracker::<f64>::new(0.3, -1000.0);
        let mut q = PresenceTracker::<f64>::new(0.3, -1000.0);
        for (i, (egg, r)) in samples.iter().enumerate() {
            let a = p.update(7, egg, *r, Timestamp(i as i64));
            let b = q.update(7, egg, *r - 13.5, Timestamp(i as i64));
            assert_eq!(a.nearest_egg, b.nearest_egg);
        }
    }

    #[test]
    fn stale_eggs_drop_out() {
        let mut p = PresenceTracker::<f64>::default();
        p.update(1, "a", -50.0, Timestamp(0));
        let e = p.update(1, "b", -70.0, Timestamp(31_000));
        assert_eq!(e.nearest_egg.as_deref(), Some("b"));
    }
}
