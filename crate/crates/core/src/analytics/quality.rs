use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use super::stats::{mad, mean, median};
use crate::reading::SensorReading;
use crate::scalar::Scalar;

pub const MIN_READINGS: usize = 100;
pub const MIN_DELIVERED_RATIO: f64 = 0.95;
pub const MAD_FACTOR: f64 = 3.0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QualityError {
    #[error("insufficient data for {egg} sensor {sensor}: {count} readings")]
    InsufficientData { egg: String, sensor: u16, count: usize },
    #[error("no eggs to compare")]
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QualityRow<S: Scalar> {
    pub egg: String,
    pub sensor: u16,
    pub count: usize,
    pub expected: usize,
    pub ratio: f64,
    pub mean: S,
    pub median_of_means: S,
    pub mad_of_means: S,
    pub bias: bool,
    pub dropout: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QualityReport<S: Scalar> {
    pub rows: Vec<QualityRow<S>>,
}

impl<S: Scalar> QualityReport<S> {
    pub fn flagged(&self) -> BTreeSet<String> {
        self.rows
            .iter()
            .filter(|r| r.bias || r.dropout)
            .map(|r| r.egg.clone())
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let _ = w.write_record([
            "egg", "sensor", "count", "expected", "ratio", "mean", "median_of_means",
            "mad_of_means", "flagged", "reason",
        ]);
        for r in &self.rows {
            let reason = match (r.bias, r.dropout) {
                (true, true) => "bias+dropout",
                (true, false) => "bias",
                (false, true) => "dropout",
                (false, false) => "",
            };
            let _ = w.write_record([
                r.egg.clone(),
                r.sensor.to_string(),
                r.count.to_string(),
                r.expected.to_string(),
                format!("{:.4}", r.ratio),
                r.mean.to_string(),
                r.median_of_means.to_string(),
                r.mad_of_means.to_string(),
                (r.bias || r.dropout).to_string(),
                reason.to_string(),
            ]);
        }
        String::from_utf8(w.into_inner().unwrap_or_default()).unwrap_or_default()
    }
}

/// Values per (egg, sensor).
pub type QualityInput<S> = BTreeMap<(String, u16), Vec<S>>;

pub fn group_readings<S: Scalar>(readings: &[SensorReading]) -> QualityInput<S> {
    let mut out: QualityInput<S> = BTreeMap::new();
    for r in readings {
        out.entry((r.endpoint.clone(), r.object_id))
            .or_default()
            .push(S::of(r.value));
    }
    out
}

/// Flags an egg when, for some sensor, its mean is more than 3·MAD from the
/// median of all eggs' means, or it delivered under 95% of `expected`.
/// `eggs` lists every egg that should appear; missing series count as empty.
pub fn quality_compare<S: Scalar>(
    eggs: &[String],
    data: &QualityInput<S>,
    expected: usize,
) -> Result<QualityReport<S>, QualityError> {
    if eggs.is_empty() {
        return Err(QualityError::Empty);
    }
    let sensors: BTreeSet<u16> = data.keys().map(|(_, s)| *s).collect();
    let mut rows = Vec::new();
    for sensor in sensors {
        let empty = Vec::new();
        let series: Vec<(&String, &Vec<S>)> = eggs
            .iter()
            .map(|e| (e, data.get(&(e.clone(), sensor)).unwrap_or(&empty)))
            .collect();
        if let Some((egg, v)) = series.iter().find(|(_, v)| v.len() < MIN_READINGS) {
            return Err(QualityError::InsufficientData {
                egg: (*egg).clone(),
                sensor,
                count: v.len(),
            });
        }
        let means: Vec<S> = series.iter().map(|(_, v)| mean(v).unwrap()).collect();
        let med = median(&means).unwrap();
        let spread = mad(&means).unwrap();
        for ((egg, v), m) in series.iter().zip(&means) {
            let ratio = if expected == 0 {
                1.0
            } else {
                v.len() as f64 / expected as f64
            };
            rows.push(QualityRow {
                egg: (*egg).clone(),
                sensor,
                count: v.len(),
                expected,
                ratio,
                mean: *m,
                median_of_means: med,
                mad_of_means: spread,
                bias: (*m - med).abs() > S::of(MAD_FACTOR) * spread,
                dropout: ratio < MIN_DELIVERED_RATIO,
            });
        }
    }
    Ok(QualityReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eggs(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("egg-{i}")).collect()
    }

    fn input(n: usize, f: impl Fn(usize, usize) -> f64) -> QualityInput<f64> {
        let mut d = BTreeMap::new();
        for e in 0..n {
            d.insert(
                (format!("egg-{e}"), 3303),
                (0..200).map(|k| f(e, k)).collect(),
            );
        }
        d
    }

    #[test]
    fn identical_eggs_unflagged() {
        let d = input(8, |_, k| 20.0 + (k as f64 * 0.1).sin());
        let rep = quality_compare(&eggs(8), &d, 200).unwrap();
        assert!(rep.flagged().is_empty());
    }

    #[test]
    fn biased_egg_flagged() {
        let d = input(8, |e, k| 20.0 + (k as f64 * 0.1).sin() + if e == 3 { 2.0 } else { 0.0 });
        let rep = quality_compare(&eggs(8), &d, 200).unwrap();
        assert_eq!(rep.flagged().into_iter().collect::<Vec<_>>(), ["egg-3"]);
        assert!(rep.to_csv().contains("egg-3,3303,200,200,1.0000"));
    }

    #[test]
    fn dropout_flagged() {
        let mut d = input(4, |_, _| 20.0);
        d.get_mut(&("egg-2".into(), 3303)).unwrap().truncate(140);
        let rep = quality_compare(&eggs(4), &d, 200).unwrap();
        assert_eq!(rep.flagged().into_iter().collect::<Vec<_>>(), ["egg-2"]);
    }

    #[test]
    fn too_few_readings() {
        let mut d = input(3, |_, _| 1.0);
        d.get_mut(&("egg-0".into(), 3303)).unwrap().truncate(99);
        assert!(matches!(
            quality_compare(&eggs(3), &d, 200),
            Err(QualityError::InsufficientData { count: 99, .. })
        ));
    }
}
