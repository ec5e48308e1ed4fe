//! Simulated eggs and hubs: deterministic environmental signals, wristband
//! radio, scenario files and the device state machine.

pub mod device;
pub mod radio;
pub mod scenario;
pub mod signal;

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

pub use device::{DeviceConfig, DeviceNode, DeviceStats};
pub use scenario::{
    DeviceKind, DeviceSpec, EggConfig, EggConfigError, EggFaults, FaultPlan, ScenarioError,
    ScenarioKind, ScenarioSpec,
};
pub use signal::{Episode, Place, SensorProfile, SignalModel};

use crate::clock::Timestamp;
use crate::psk::{KeyTable, PskIdentity, KEY_LEN};
use scenario::{EnergyChannelSpec, WristbandSpec};

/// Shared world state the devices sample from.
#[derive(Clone, Debug)]
pub struct Environment {
    pub signal: SignalModel<f64>,
    pub start: Timestamp,
    pub seed: u64,
    pub rssi_sigma_db: f64,
    pub wristbands: Vec<WristbandSpec>,
    pub channels: Vec<EnergyChannelSpec>,
    rooms: BTreeMap<(String, String), (f64, f64)>,
}

impl Environment {
    pub fn from_scenario(s: &ScenarioSpec) -> Self {
        let rooms = s
            .sites
            .iter()
            .flat_map(|site| {
                site.rooms
                    .iter()
                    .map(|r| ((site.site_id.clone(), r.name.clone()), (r.x, r.y)))
            })
            .collect();
        Environment {
            signal: s.signal_model(),
            start: s.start(),
            seed: s.seed,
            rssi_sigma_db: s.rssi_sigma_db(),
            wristbands: s.wristbands.clone(),
            channels: s.energy_channels.clone(),
            rooms,
        }
    }

    pub fn rel_s(&self, t: Timestamp) -> f64 {
        (t.0 - self.start.0) as f64 / 1000.0
    }

    /// Band `band` as heard by an egg at `pos`; `None` when the band is away
    /// or below sensitivity.
    pub fn rssi(&self, site: &str, band: u16, egg: &str, pos: (f64, f64), t: Timestamp) -> Option<f64> {
        let b = self.wristbands.iter().find(|b| b.site == site && b.band == band)?;
        let room = b.room_at(self.rel_s(t))?;
        let at = *self.rooms.get(&(site.to_string(), room.to_string()))?;
        let noise = if self.rssi_sigma_db > 0.0 {
            let k = signal::noise_key(&[
                &self.seed.to_le_bytes(),
                b"rssi",
                egg.as_bytes(),
                &band.to_le_bytes(),
                &t.0.to_le_bytes(),
            ]);
            self.rssi_sigma_db * signal::gaussian::<f64>(k)
        } else {
            0.0
        };
        let v = radio::rssi_at(radio::distance(pos, at), noise);
        (v >= radio::SENSITIVITY_DBM).then_some(v)
    }

    pub fn watts(&self, site: &str, channel: &str, t: Timestamp) -> Option<f64> {
        self.channels
            .iter()
            .find(|c| c.site == site && c.name == channel)
            .map(|c| c.watts_at(self.rel_s(t)))
    }

    /// The room a band is in at `t`.
    pub fn band_room(&self, site: &str, band: u16, t: Timestamp) -> Option<&str> {
        self.wristbands
            .iter()
            .find(|b| b.site == site && b.band == band)?
            .room_at(self.rel_s(t))
    }
}

/// Per-device pre-shared key derived from the fleet seed.
pub fn device_identity(seed: u64, endpoint: &str) -> PskIdentity {
    let mut h = Sha256::new();
    h.update(b"egg psk");
    h.update(seed.to_le_bytes());
    h.update(endpoint.as_bytes());
    let d = h.finalize();
    PskIdentity::new(endpoint, &d[..KEY_LEN]).expect("16-byte key")
}

pub fn fleet_keys(seed: u64, devices: &[DeviceSpec]) -> KeyTable {
    let mut t = KeyTable::new();
    for d in devices {
        t.insert(&device_identity(seed, &d.endpoint));
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rssi_same_room_and_far() {
        let mut s = ScenarioSpec::home(1, 3);
        s.rssi_sigma_db = Some(0.0);
        let env = Environment::from_scenario(&s);
        // band 1 is in the kitchen (0, 0) during the first hour
        let t = s.start() + std::time::Duration::from_secs(10);
        assert_eq!(env.rssi("household-01", 1, "e", (0.0, 0.0), t), Some(-45.0));
        let far = env.rssi("household-01", 1, "e", (6.0, 0.0), t).unwrap();
        approx::assert_abs_diff_eq!(far, -45.0 - 25.0 * 6f64.log10(), epsilon = 1e-9);
        assert_eq!(env.rssi("household-01", 2, "e", (0.0, 0.0), t), None);
        assert_eq!(env.watts("household-01", "kettle", s.start()), Some(0.0));
    }

    #[test]
    fn keys_are_per_device() {
        let a = device_identity(1, "egg-000");
        let b = device_identity(1, "egg-001");
        assert_ne!(a, b);
        assert_eq!(a, device_identity(1, "egg-000"));
    }
}
