//! Wall-clock and virtual time sources.
//!
//! Every timer in the system (CoAP retransmission, registration lifetime,
//! broker visibility, notification periods) reads time through [`Clock`], so a
//! whole deployment can run on a [`VirtualClock`] and be replayed exactly.

use std::fmt;
use std::ops::{Add, Sub};
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};

/// Milliseconds since the Unix epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub fn from_millis(ms: i64) -> Self {
        Timestamp(ms)
    }

    pub fn from_secs_f64(s: f64) -> Self {
        Timestamp((s * 1000.0).round() as i64)
    }

    pub fn as_millis(self) -> i64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    /// Milliseconds since the preceding UTC midnight.
    pub fn millis_of_day(self) -> i64 {
        self.0.rem_euclid(86_400_000)
    }

    /// Days since the Unix epoch (UTC).
    pub fn day_index(self) -> i64 {
        self.0.div_euclid(86_400_000)
    }

    pub fn to_datetime(self) -> DateTime<Utc> {
        Utc.timestamp_millis_opt(self.0)
            .single()
            .unwrap_or(DateTime::<Utc>::UNIX_EPOCH)
    }

    pub fn from_datetime(dt: DateTime<Utc>) -> Self {
        Timestamp(dt.timestamp_millis())
    }

    /// RFC 3339 with millisecond precision, e.g. `2024-01-01T00:00:03.000Z`.
    pub fn to_rfc3339(self) -> String {
        self.to_datetime()
            .to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
    }

    pub fn parse_rfc3339(s: &str) -> Option<Self> {
        DateTime::parse_from_rfc3339(s)
            .ok()
            .map(|d| Timestamp(d.with_timezone(&Utc).timestamp_millis()))
    }

    pub fn saturating_sub(self, other: Timestamp) -> Duration {
        Duration::from_millis((self.0 - other.0).max(0) as u64)
    }
}

impl Add<Duration> for Timestamp {
    type Output = Timestamp;
    fn add(self, d: Duration) -> Timestamp {
        Timestamp(self.0 + d.as_millis() as i64)
    }
}

impl Sub<Duration> for Timestamp {
    type Output = Timestamp;
    fn sub(self, d: Duration) -> Timestamp {
        Timestamp(self.0 - d.as_millis() as i64)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_rfc3339())
    }
}

/// 2024-01-01T00:00:00Z, the default origin of virtual runs. Midnight-aligned
/// so that daily cycles start at their zero crossing.
pub const DEFAULT_EPOCH: Timestamp = Timestamp(1_704_067_200_000);

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp(Utc::now().timestamp_millis())
    }
}

/// A manually advanced clock. Clones share the same time.
#[derive(Clone, Debug)]
pub struct VirtualClock {
    now: Arc<AtomicI64>,
}

impl VirtualClock {
    pub fn new(start: Timestamp) -> Self {
        VirtualClock {
            now: Arc::new(AtomicI64::new(start.0)),
        }
    }

    pub fn set(&self, t: Timestamp) {
        self.now.store(t.0, Ordering::SeqCst);
    }

    /// Moves time forward; never moves it backwards.
    pub fn advance_to(&self, t: Timestamp) {
        self.now.fetch_max(t.0, Ordering::SeqCst);
    }

    pub fn advance(&self, d: Duration) {
        self.now.fetch_add(d.as_millis() as i64, Ordering::SeqCst);
    }
}

impl Default for VirtualClock {
    fn default() -> Self {
        VirtualClock::new(DEFAULT_EPOCH)
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.now.load(Ordering::SeqCst))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_clock_is_shared_and_monotone() {
        let c = VirtualClock::new(Timestamp(1000));
        let c2 = c.clone();
        c.advance(Duration::from_secs(2));
        assert_eq!(c2.now(), Timestamp(3000));
        c2.advance_to(Timestamp(500));
        assert_eq!(c.now(), Timestamp(3000));
    }

    #[test]
    fn epoch_is_midnight() {
        assert_eq!(DEFAULT_EPOCH.millis_of_day(), 0);
        assert_eq!(DEFAULT_EPOCH.to_rfc3339(), "2024-01-01T00:00:00.000Z");
        assert_eq!(Timestamp::parse_rfc3339("2024-01-01T00:00:00.000Z"), Some(DEFAULT_EPOCH));
    }
}
