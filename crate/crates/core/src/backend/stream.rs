use std::collections::VecDeque;
use std::sync::{Arc, Mutex, Weak};

use serde::{Deserialize, Serialize};

use crate::analytics::ComfortEvent;
use crate::reading::SensorReading;

pub const DEFAULT_SUBSCRIBER_BUFFER: usize = 1024;

/// Which readings a subscriber wants; empty fields match everything.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamFilter {
    #[serde(default)]
    pub site: Option<String>,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub object_id: Option<u16>,
}

impl StreamFilter {
    pub fn matches(&self, item: &StreamItem) -> bool {
        match item {
            StreamItem::Reading(r) => {
                self.site.as_ref().is_none_or(|s| *s == r.site)
                    && self.endpoint.as_ref().is_none_or(|e| *e == r.endpoint)
                    && self.object_id.is_none_or(|o| o == r.object_id)
            }
            StreamItem::Comfort(ev) => {
                self.endpoint.as_ref().is_none_or(|e| *e == ev.endpoint)
                    && self
                        .site
                        .as_ref()
                        .is_none_or(|s| ev.endpoint.starts_with(&format!("{s}-")))
            }
        }
    }
}

/// What live subscribers receive.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StreamItem {
    Reading(SensorReading),
    Comfort(ComfortEvent),
}

impl StreamItem {
    pub fn kind(&self) -> &'static str {
        match self {
            StreamItem::Reading(_) => "reading",
            StreamItem::Comfort(_) => "comfort",
        }
    }
}

#[derive(Debug)]
struct Buffer {
    items: VecDeque<StreamItem>,
    capacity: usize,
    dropped: u64,
}

/// Receiving end of a live subscription. Slow readers lose the oldest
/// readings rather than blocking ingest.
#[derive(Debug, Clone)]
pub struct Subscription {
    buf: Arc<Mutex<Buffer>>,
}

impl Subscription {
    pub fn drain(&self) -> Vec<StreamItem> {
        self.buf.lock().unwrap().items.drain(..).collect()
    }

    pub fn dropped(&self) -> u64 {
        self.buf.lock().unwrap().dropped
    }
}

#[derive(Debug, Default)]
pub struct StreamHub {
    subs: Vec<(StreamFilter, Weak<Mutex<Buffer>>)>,
    published: u64,
}

impl StreamHub {
    pub fn subscribe(&mut self, filter: StreamFilter, capacity: usize) -> Subscription {
        let buf = Arc::new(Mutex::new(Buffer {
            items: VecDeque::new(),
            capacity: capacity.max(1),
            dropped: 0,
        }));
        self.subs.push((filter, Arc::downgrade(&buf)));
        Subscription { buf }
    }

    pub fn publish(&mut self, item: StreamItem) {
        self.published += 1;
        self.subs.retain(|(f, w)| {
            let Some(buf) = w.upgrade() else { return false };
            if f.matches(&item) {
                let mut b = buf.lock().unwrap();
                if b.items.len() >= b.capacity {
                    b.items.pop_front();
                    b.dropped += 1;
                }
                b.items.push_back(item.clone());
            }
            true
        });
    }

    pub fn subscribers(&self) -> usize {
        self.subs.iter().filter(|(_, w)| w.strong_count() > 0).count()
    }

    pub fn published(&self) -> u64 {
        self.published
    }
}
