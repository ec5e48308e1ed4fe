//! Drivers that move datagrams and timer wake-ups between sans-IO nodes,
//! either on a virtual clock or over real UDP sockets.

pub mod quality;
pub mod udp;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::clock::Timestamp;
use crate::backend::{Backend, BackendConfig, BackendError};
use crate::eggsim::{device_identity, fleet_keys, DeviceConfig, DeviceNode, Environment, FaultPlan, ScenarioSpec};

/// A sans-IO network participant.
pub trait Node {
    fn addr(&self) -> SocketAddr;
    fn handle_datagram(&mut self, from: SocketAddr, bytes: &[u8], now: Timestamp);
    fn handle_timeout(&mut self, now: Timestamp);
    fn poll_timeout(&self) -> Option<Timestamp>;
    fn poll_transmit(&mut self) -> Option<(SocketAddr, Vec<u8>)>;
    /// The last datagram could not be delivered.
    fn handle_unreachable(&mut self, _now: Timestamp) {}
}

impl<N: Node> Node for Arc<Mutex<N>> {
    fn addr(&self) -> SocketAddr {
        self.lock().unwrap().addr()
    }
    fn handle_datagram(&mut self, from: SocketAddr, bytes: &[u8], now: Timestamp) {
        self.lock().unwrap().handle_datagram(from, bytes, now)
    }
    fn handle_timeout(&mut self, now: Timestamp) {
        self.lock().unwrap().handle_timeout(now)
    }
    fn poll_timeout(&self) -> Option<Timestamp> {
        self.lock().unwrap().poll_timeout()
    }
    fn poll_transmit(&mut self) -> Option<(SocketAddr, Vec<u8>)> {
        self.lock().unwrap().poll_transmit()
    }
    fn handle_unreachable(&mut self, now: Timestamp) {
        self.lock().unwrap().handle_unreachable(now)
    }
}

pub fn backend_addr() -> SocketAddr {
    SocketAddr::V4(SocketAddrV4::new(Ipv4Addr::new(10, 0, 0, 1), 5684))
}

pub fn device_addr(i: usize) -> SocketAddr {
    let i = i as u32 + 1;
    SocketAddr::V4(SocketAddrV4::new(
        Ipv4Addr::new(10, 1, (i >> 8) as u8, i as u8),
        5683,
    ))
}

#[derive(Debug)]
enum Event {
    Deliver {
        to: usize,
        from: SocketAddr,
        bytes: Vec<u8>,
    },
    Wake(usize),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NetStats {
    pub delivered: u64,
    pub dropped: u64,
    pub bytes: u64,
    pub wakes: u64,
}

/// Discrete-event testbed: node 0 is the backend, nodes 1.. are devices.
pub struct Testbed<B: Node> {
    pub backend: B,
    pub devices: Vec<DeviceNode>,
    now: Timestamp,
    seq: u64,
    heap: BinaryHeap<Reverse<(Timestamp, u64)>>,
    events: HashMap<u64, Event>,
    scheduled: Vec<Option<Timestamp>>,
    by_addr: HashMap<SocketAddr, usize>,
    latency: Duration,
    loss: Option<(ChaCha8Rng, f64)>,
    down: HashSet<usize>,
    digest: Sha256,
    stats: NetStats,
}

impl<B: Node> Testbed<B> {
    pub fn new(backend: B, devices: Vec<DeviceNode>, start: Timestamp) -> Self {
        let mut by_addr = HashMap::new();
        by_addr.insert(backend.addr(), 0);
        for (i, d) in devices.iter().enumerate() {
            by_addr.insert(d.addr(), i + 1);
        }
        let n = devices.len() + 1;
        let mut tb = Testbed {
            backend,
            devices,
            now: start,
            seq: 0,
            heap: BinaryHeap::new(),
            events: HashMap::new(),
            scheduled: vec![None; n],
            by_addr,
            latency: Duration::ZERO,
            loss: None,
            down: HashSet::new(),
            digest: Sha256::new(),
            stats: NetStats::default(),
        };
        for i in 0..n {
            tb.reschedule(i);
        }
        tb
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    /// Drops each datagram with probability `p`.
    pub fn with_loss(mut self, p: f64, seed: u64) -> Self {
        self.loss = Some((ChaCha8Rng::seed_from_u64(seed), p));
        self
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn stats(&self) -> NetStats {
        self.stats
    }

    /// Hash of every delivered datagram with its time and endpoints.
    pub fn digest(&self) -> String {
        hex::encode(self.digest.clone().finalize())
    }

    /// Cuts a node off the network; its traffic is dropped both ways.
    pub fn set_down(&mut self, node: usize, down: bool) {
        if down {
            self.down.insert(node);
        } else {
            self.down.remove(&node);
        }
    }

    pub fn device_index(&self, endpoint: &str) -> Option<usize> {
        self.devices.iter().position(|d| d.endpoint() == endpoint)
    }

    fn node(&mut self, i: usize) -> &mut dyn Node {
        if i == 0 {
            &mut self.backend
        } else {
            &mut self.devices[i - 1]
        }
    }

    fn push(&mut self, t: Timestamp, ev: Event) {
        self.seq += 1;
        self.heap.push(Reverse((t, self.seq)));
        self.events.insert(self.seq, ev);
    }

    fn reschedule(&mut self, i: usize) {
        let next = self.node(i).poll_timeout().map(|t| t.max(self.now));
        match next {
            Some(t) if next != self.scheduled[i] => {
                self.scheduled[i] = next;
                self.push(t, Event::Wake(i));
            }
            Some(_) => {}
            None => self.scheduled[i] = None,
        }
    }

    fn flush(&mut self, i: usize) {
        let now = self.now;
        let from = self.node(i).addr();
        while let Some((to, bytes)) = self.node(i).poll_transmit() {
            let Some(&j) = self.by_addr.get(&to) else {
                self.stats.dropped += 1;
                self.node(i).handle_unreachable(now);
                continue;
            };
            if self.down.contains(&i) || self.down.contains(&j) {
                self.stats.dropped += 1;
                continue;
            }
            if let Some((rng, p)) = self.loss.as_mut() {
                if rng.gen::<f64>() < *p {
                    self.stats.dropped += 1;
                    continue;
                }
            }
            let at = now + self.latency;
            self.push(at, Event::Deliver { to: j, from, bytes });
        }
        self.reschedule(i);
    }

    /// Processes every event up to and including `until`.
    pub fn run_until(&mut self, until: Timestamp) {
        while let Some(&Reverse((t, id))) = self.heap.peek() {
            if t > until {
                break;
            }
            self.heap.pop();
            let ev = self.events.remove(&id).expect("event stored");
            self.now = self.now.max(t);
            let now = self.now;
            match ev {
                Event::Deliver { to, from, bytes } => {
                    self.stats.delivered += 1;
                    self.stats.bytes += bytes.len() as u64;
                    self.digest.update(now.0.to_le_bytes());
                    self.digest.update(from.to_string().as_bytes());
                    self.digest.update((to as u32).to_le_bytes());
                    self.digest.update((bytes.len() as u32).to_le_bytes());
                    self.digest.update(&bytes);
                    self.node(to).handle_datagram(from, &bytes, now);
                    self.flush(to);
                }
                Event::Wake(i) => {
                    if self.scheduled[i] != Some(t) {
                        continue;
                    }
                    self.scheduled[i] = None;
                    self.stats.wakes += 1;
                    self.node(i).handle_timeout(now);
                    self.flush(i);
                }
            }
        }
        self.now = self.now.max(until);
    }

    pub fn run_for(&mut self, d: Duration) {
        let until = self.now + d;
        self.run_until(until);
    }

    /// Runs `f` against the backend at the current time and sends whatever
    /// it queued.
    pub fn with_backend<R>(&mut self, f: impl FnOnce(&mut B, Timestamp) -> R) -> R {
        let now = self.now;
        let r = f(&mut self.backend, now);
        self.flush(0);
        r
    }

    pub fn with_device<R>(&mut self, i: usize, f: impl FnOnce(&mut DeviceNode, Timestamp) -> R) -> R {
        let now = self.now;
        let r = f(&mut self.devices[i], now);
        self.flush(i + 1);
        r
    }
}

/// Builds every device of a scenario, pointed at `server`. Boots are
/// spread over the first few seconds.
pub fn build_devices(
    scenario: &ScenarioSpec,
    faults: &FaultPlan,
    server: SocketAddr,
    addr_of: impl Fn(usize) -> SocketAddr,
) -> Vec<DeviceNode> {
    let env = Arc::new(Environment::from_scenario(scenario));
    let start = scenario.start();
    scenario
        .devices()
        .into_iter()
        .enumerate()
        .map(|(i, spec)| {
            let cfg = DeviceConfig {
                addr: addr_of(i),
                server,
                identity: device_identity(scenario.seed, &spec.endpoint),
                env: env.clone(),
                faults: faults.for_egg(&spec.endpoint),
                lifetime_s: scenario.lifetime_s,
                fw_version: scenario.fw_version.clone(),
                clock_skew_ms: scenario.clock_skew_ms,
                boot_at: start + Duration::from_millis((i as u64 * 97) % BOOT_SPREAD_MS),
            };
            DeviceNode::new(spec, cfg)
        })
        .collect()
}

const BOOT_SPREAD_MS: u64 = 3000;

/// A backend plus the scenario's fleet on a virtual network.
pub fn virtual_testbed(
    scenario: &ScenarioSpec,
    faults: &FaultPlan,
    data_dir: &Path,
) -> Result<Testbed<Backend>, BackendError> {
    let keys = fleet_keys(scenario.seed, &scenario.devices());
    let mut cfg = BackendConfig::new(backend_addr(), data_dir, keys);
    cfg.seed = scenario.seed;
    cfg.collector.default_site = scenario.default_site().to_string();
    cfg.collector.default_period = scenario.sample_interval();
    cfg.collector
        .periods
        .insert(crate::lwm2m::OBJ_ENERGY, scenario.energy_interval());
    let mut backend = Backend::open(cfg)?;
    for w in &faults.worker_crash {
        let at = scenario.start() + Duration::from_millis((w.at_s * 1000.0) as u64);
        backend.schedule_worker_crash(&w.worker, at);
    }
    let devices = build_devices(scenario, faults, backend_addr(), device_addr);
    Ok(Testbed::new(backend, devices, scenario.start()))
}
