//! Presence from wristband RSSI, desk comfort rules and the fleet quality
//! comparator.

pub mod comfort;
pub mod presence;
pub mod quality;
pub mod stats;

pub use comfort::{
    ComfortActions, ComfortConfig, ComfortEngine, ComfortError, ComfortEvent, ComfortPreference,
    NotificationSink, SinkRecord, Variable,
};
pub use presence::{PresenceEstimate, PresenceTracker};
pub use quality::{group_readings, quality_compare, QualityError, QualityInput, QualityReport, QualityRow};
pub use stats::{mad, mean, median, Ewma};
