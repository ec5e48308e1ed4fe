use std::collections::{HashMap, VecDeque};

use crate::reading::SensorReading;

pub const DEFAULT_LIVE_CAPACITY: usize = 3600;

/// Most recent readings per (endpoint, object) series.
#[derive(Debug)]
pub struct LiveWindow {
    capacity: usize,
    series: HashMap<(String, u16), VecDeque<SensorReading>>,
}

impl Default for LiveWindow {
    fn default() -> Self {
        LiveWindow::new(DEFAULT_LIVE_CAPACITY)
    }
}

impl LiveWindow {
    pub fn new(capacity: usize) -> Self {
        LiveWindow {
            capacity: capacity.max(1),
            series: HashMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, r: SensorReading) {
        let buf = self
            .series
            .entry((r.endpoint.clone(), r.object_id))
            .or_default();
        if buf.len() == self.capacity {
            buf.pop_front();
        }
        buf.push_back(r);
    }

    pub fn latest(&self, endpoint: &str, object_id: u16) -> Option<&SensorReading> {
        self.series
            .get(&(endpoint.to_string(), object_id))?
            .back()
    }

    pub fn snapshot(&self, endpoint: &str, object_id: u16) -> Vec<SensorReading> {
        self.series
            .get(&(endpoint.to_string(), object_id))
            .map(|b| b.iter().cloned().collect())
            .unwrap_or_default()
    }

    pub fn len(&self, endpoint: &str, object_id: u16) -> usize {
        self.series
            .get(&(endpoint.to_string(), object_id))
            .map_or(0, VecDeque::len)
    }

    pub fn series(&self) -> Vec<(String, u16)> {
        let mut v: Vec<_> = self.series.keys().cloned().collect();
        v.sort();
        v
    }
}
