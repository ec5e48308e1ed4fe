//! Side-by-side run of co-located eggs followed by the quality comparison.

use std::path::Path;
use std::time::Duration;

use thiserror::Error;

use super::virtual_testbed;
use crate::analytics::quality::{group_readings, quality_compare, QualityError, QualityReport};
use crate::backend::BackendError;
use crate::eggsim::{DeviceKind, FaultPlan, ScenarioSpec};
use crate::reading::SensorReading;

/// Time given to registration before the window opens.
pub const WARMUP: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum QualityRunError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Quality(#[from] QualityError),
}

#[derive(Debug)]
pub struct QualityRun {
    pub report: QualityReport<f64>,
    /// Pseudonymous endpoints, in egg order.
    pub eggs: Vec<String>,
    /// Readings inside the window.
    pub readings: Vec<SensorReading>,
    pub expected: usize,
}

/// Runs `spec` for warm-up plus `window` and compares every egg over the
/// window. The scenario's own duration is ignored.
pub fn quality_run(
    spec: &ScenarioSpec,
    faults: &FaultPlan,
    window: Duration,
    data_dir: &Path,
) -> Result<QualityRun, QualityRunError> {
    let mut spec = spec.clone();
    spec.duration_s = (WARMUP + window).as_secs_f64() + 5.0;
    let mut tb = virtual_testbed(&spec, faults, data_dir)?;
    tb.run_until(spec.end());
    let t0 = spec.start() + WARMUP;
    let t1 = t0 + window;
    let readings: Vec<SensorReading> = tb
        .backend
        .store()
        .all()
        .map_err(BackendError::from)?
        .into_iter()
        .filter(|r| r.device_time >= t0 && r.device_time < t1)
        .collect();
    let eggs: Vec<String> = spec
        .devices()
        .iter()
        .filter(|d| d.kind == DeviceKind::Egg)
        .filter_map(|d| tb.backend.collector().pseudonyms.lookup_endpoint(&d.endpoint))
        .collect();
    let expected = (window.as_millis() / spec.sample_interval().as_millis()) as usize;
    let report = quality_compare(&eggs, &group_readings(&readings), expected)?;
    Ok(QualityRun {
        report,
        eggs,
        readings,
        expected,
    })
}
