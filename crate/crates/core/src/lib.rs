//! Indoor sensing testbed: constrained-device protocol stack, simulated
//! fleet, ingestion pipeline, storage and analytics.

pub mod analytics;
pub mod backend;
pub mod broker;
pub mod clock;
pub mod coap;
pub mod collector;
pub mod datastore;
pub mod eggsim;
pub mod fota;
pub mod lwm2m;
pub mod psk;
pub mod reading;
pub mod scalar;
pub mod sim;

pub use clock::{Clock, SystemClock, Timestamp, VirtualClock};
pub use scalar::Scalar;
