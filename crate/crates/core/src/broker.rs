//! In-process topic exchanges with named, bounded, at-least-once queues.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;

pub const DEFAULT_CAPACITY: usize = 100_000;
pub const DEFAULT_VISIBILITY: Duration = Duration::from_secs(30);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Exchange {
    Control,
    LiveData,
}

impl Exchange {
    fn idx(self) -> usize {
        match self {
            Exchange::Control => 0,
            Exchange::LiveData => 1,
        }
    }
}

impl fmt::Display for Exchange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Exchange::Control => "CONTROL",
            Exchange::LiveData => "LIVE_DATA",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BrokerError {
    #[error("unknown queue {0:?}")]
    UnknownQueue(String),
    #[error("unknown consumer {0}")]
    UnknownConsumer(u64),
    #[error("unknown delivery tag {0}")]
    UnknownDelivery(u64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueuedMessage {
    pub routing_key: String,
    pub payload: Arc<[u8]>,
    pub enqueued_at: Timestamp,
    pub redelivered: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delivery {
    pub tag: u64,
    pub message: QueuedMessage,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct QueueStats {
    pub published: u64,
    pub acked: u64,
    pub dropped_overflow: u64,
    pub redelivered: u64,
    pub ready: usize,
    pub unacked: usize,
}

#[derive(Debug)]
struct Unacked {
    consumer: u64,
    message: QueuedMessage,
    deadline: Timestamp,
    /// position in publish order, for requeueing
    seq: u64,
}

#[derive(Debug)]
struct Queue {
    capacity: usize,
    ready: VecDeque<(u64, QueuedMessage)>,
    unacked: HashMap<u64, Unacked>,
    next_seq: u64,
    stats: QueueStats,
}

impl Queue {
    fn push(&mut self, msg: QueuedMessage) {
        self.stats.published += 1;
        if self.ready.len() + self.unacked.len() >= self.capacity {
            if self.ready.pop_front().is_some() {
                self.stats.dropped_overflow += 1;
            } else {
                // everything in flight: the new message is the one dropped
                self.stats.dropped_overflow += 1;
                return;
            }
        }
        self.ready.push_back((self.next_seq, msg));
        self.next_seq += 1;
    }

    /// Puts unacked messages back at the head, keeping publish order.
    fn requeue(&mut self, mut items: Vec<Unacked>) {
        items.sort_by_key(|u| std::cmp::Reverse(u.seq));
        for mut u in items {
            u.message.redelivered = true;
            self.stats.redelivered += 1;
            let pos = self.ready.partition_point(|(s, _)| *s < u.seq);
            self.ready.insert(pos, (u.seq, u.message));
        }
    }
}

/// AMQP style topic match: `*` is exactly one word, `#` zero or more.
pub fn topic_matches(pattern: &str, key: &str) -> bool {
    fn go(p: &[&str], k: &[&str]) -> bool {
        match p.split_first() {
            None => k.is_empty(),
            Some((&"#", rest)) => (0..=k.len()).any(|i| go(rest, &k[i..])),
            Some((&w, rest)) => match k.split_first() {
                Some((kw, krest)) => (w == "*" || w == *kw) && go(rest, krest),
                None => false,
            },
        }
    }
    let p: Vec<&str> = pattern.split('.').collect();
    let k: Vec<&str> = key.split('.').collect();
    go(&p, &k)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BrokerMetrics {
    pub published_control: u64,
    pub published_live: u64,
    pub unroutable_control: u64,
    pub unroutable_live: u64,
    pub queues: Vec<(String, QueueStats)>,
}

#[derive(Debug)]
pub struct Broker {
    queues: HashMap<String, Queue>,
    bindings: Vec<(Exchange, String, String)>,
    consumers: HashMap<u64, String>,
    published: [u64; 2],
    unroutable: [u64; 2],
    visibility: Duration,
    next_consumer: u64,
    next_tag: u64,
}

impl Default for Broker {
    fn default() -> Self {
        Broker::new(DEFAULT_VISIBILITY)
    }
}

impl Broker {
    pub fn new(visibility: Duration) -> Self {
        Broker {
            queues: HashMap::new(),
            bindings: Vec::new(),
            consumers: HashMap::new(),
            published: [0; 2],
            unroutable: [0; 2],
            visibility,
            next_consumer: 0,
            next_tag: 0,
        }
    }

    /// Declares a queue; redeclaring an existing queue is a no-op.
    pub fn declare_queue(&mut self, name: &str, capacity: usize) {
        self.queues.entry(name.to_string()).or_insert_with(|| Queue {
            capacity: capacity.max(1),
            ready: VecDeque::new(),
            unacked: HashMap::new(),
            next_seq: 0,
            stats: QueueStats::default(),
        });
    }

    pub fn bind(&mut self, exchange: Exchange, pattern: &str, queue: &str) -> Result<(), BrokerError> {
        if !self.queues.contains_key(queue) {
            return Err(BrokerError::UnknownQueue(queue.into()));
        }
        let b = (exchange, pattern.to_string(), queue.to_string());
        if !self.bindings.contains(&b) {
            self.bindings.push(b);
        }
        Ok(())
    }

    /// Copies the message into every matching queue; returns how many.
    pub fn publish(
        &mut self,
        exchange: Exchange,
        routing_key: &str,
        payload: impl Into<Arc<[u8]>>,
        now: Timestamp,
    ) -> usize {
        self.published[exchange.idx()] += 1;
        let mut targets: Vec<&str> = self
            .bindings
            .iter()
            .filter(|(e, p, _)| *e == exchange && topic_matches(p, routing_key))
            .map(|(_, _, q)| q.as_str())
            .collect();
        targets.sort_unstable();
        targets.dedup();
        if targets.is_empty() {
            self.unroutable[exchange.idx()] += 1;
            return 0;
        }
        let msg = QueuedMessage {
            routing_key: routing_key.to_string(),
            payload: payload.into(),
            enqueued_at: now,
            redelivered: false,
        };
        let n = targets.len();
        let targets: Vec<String> = targets.into_iter().map(String::from).collect();
        for q in targets {
            self.queues
                .get_mut(&q)
                .expect("bound queue exists")
                .push(msg.clone());
        }
        n
    }

    /// Enqueues directly onto a named work queue, bypassing the exchanges.
    pub fn enqueue(
        &mut self,
        queue: &str,
        routing_key: &str,
        payload: impl Into<Arc<[u8]>>,
        now: Timestamp,
    ) -> Result<(), BrokerError> {
        let q = self
            .queues
            .get_mut(queue)
            .ok_or_else(|| BrokerError::UnknownQueue(queue.into()))?;
        q.push(QueuedMessage {
            routing_key: routing_key.to_string(),
            payload: payload.into(),
            enqueued_at: now,
            redelivered: false,
        });
        Ok(())
    }

    pub fn subscribe(&mut self, queue: &str) -> Result<u64, BrokerError> {
        if !self.queues.contains_key(queue) {
            return Err(BrokerError::UnknownQueue(queue.into()));
        }
        self.next_consumer += 1;
        self.consumers.insert(self.next_consumer, queue.to_string());
        Ok(self.next_consumer)
    }

    fn queue_of(&mut self, consumer: u64) -> Result<&mut Queue, BrokerError> {
        let name = self
            .consumers
            .get(&consumer)
            .ok_or(BrokerError::UnknownConsumer(consumer))?;
        Ok(self.queues.get_mut(name).expect("consumer queue exists"))
    }

    /// Takes the next ready message; it stays unacked until [`Broker::ack`]
    /// or the visibility timeout.
    pub fn fetch(&mut self, consumer: u64, now: Timestamp) -> Result<Option<Delivery>, BrokerError> {
        let deadline = now + self.visibility;
        self.next_tag += 1;
        let tag = self.next_tag;
        let q = self.queue_of(consumer)?;
        let Some((seq, message)) = q.ready.pop_front() else {
            return Ok(None);
        };
        q.unacked.insert(
            tag,
            Unacked {
                consumer,
                message: message.clone(),
                deadline,
                seq,
            },
        );
        Ok(Some(Delivery { tag, message }))
    }

    pub fn ack(&mut self, consumer: u64, tag: u64) -> Result<(), BrokerError> {
        let q = self.queue_of(consumer)?;
        match q.unacked.get(&tag) {
            Some(u) if u.consumer == consumer => {
                q.unacked.remove(&tag);
                q.stats.acked += 1;
                Ok(())
            }
            _ => Err(BrokerError::UnknownDelivery(tag)),
        }
    }

    /// Detaches a consumer (crash or shutdown); its unacked messages return
    /// to the head of the queue.
    pub fn drop_consumer(&mut self, consumer: u64) {
        let Some(name) = self.consumers.remove(&consumer) else {
            return;
        };
        let q = self.queues.get_mut(&name).expect("consumer queue exists");
        let tags: Vec<u64> = q
            .unacked
            .iter()
            .filter(|(_, u)| u.consumer == consumer)
            .map(|(t, _)| *t)
            .collect();
        let items = tags.iter().filter_map(|t| q.unacked.remove(t)).collect();
        q.requeue(items);
    }

    pub fn poll_timeout(&self) -> Option<Timestamp> {
        self.queues
            .values()
            .flat_map(|q| q.unacked.values().map(|u| u.deadline))
            .min()
    }

    /// Requeues messages whose visibility timeout has passed.
    pub fn handle_timeout(&mut self, now: Timestamp) {
        for q in self.queues.values_mut() {
            let tags: Vec<u64> = q
                .unacked
                .iter()
                .filter(|(_, u)| u.deadline <= now)
                .map(|(t, _)| *t)
                .collect();
            if tags.is_empty() {
                continue;
            }
            let items = tags.iter().filter_map(|t| q.unacked.remove(t)).collect();
            q.requeue(items);
        }
    }

    pub fn queue_stats(&self, queue: &str) -> Option<QueueStats> {
        self.queues.get(queue).map(|q| QueueStats {
            ready: q.ready.len(),
            unacked: q.unacked.len(),
            ..q.stats
        })
    }

    pub fn is_idle(&self) -> bool {
        self.queues
            .values()
            .all(|q| q.ready.is_empty() && q.unacked.is_empty())
    }

    pub fn has_ready(&self, queue: &str) -> bool {
        self.queues.get(queue).is_some_and(|q| !q.ready.is_empty())
    }

    pub fn metrics(&self) -> BrokerMetrics {
        let mut queues: Vec<_> = self
            .queues
            .keys()
            .map(|k| (k.clone(), self.queue_stats(k).expect("listed")))
            .collect();
        queues.sort_by(|a, b| a.0.cmp(&b.0));
        BrokerMetrics {
            published_control: self.published[0],
            published_live: self.published[1],
            unroutable_control: self.unroutable[0],
            unroutable_live: self.unroutable[1],
            queues,
        }
    }
}
