use std::collections::VecDeque;
use std::time::Duration;

use serde::Serialize;

use crate::clock::Timestamp;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RestartPolicy {
    pub delay: Duration,
    pub max_restarts: usize,
    pub window: Duration,
}

impl Default for RestartPolicy {
    fn default() -> Self {
        RestartPolicy {
            delay: Duration::from_millis(500),
            max_restarts: 10,
            window: Duration::from_secs(60),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum WorkerStatus {
    Running,
    Restarting { at: Timestamp },
    GaveUp { at: Timestamp },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RestartEvent {
    pub worker: String,
    pub crashed_at: Timestamp,
    pub cause: String,
}

#[derive(Debug)]
struct Slot {
    name: String,
    status: WorkerStatus,
    recent: VecDeque<Timestamp>,
    restarts: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct WorkerHealth {
    pub name: String,
    pub status: WorkerStatus,
    pub restarts: u64,
}

/// Restart bookkeeping for named workers. The owner runs the workers; the
/// supervisor decides when a crashed one comes back or is given up on.
#[derive(Debug, Default)]
pub struct Supervisor {
    policy: RestartPolicy,
    slots: Vec<Slot>,
    log: Vec<RestartEvent>,
}

impl Supervisor {
    pub fn new(policy: RestartPolicy) -> Self {
        Supervisor {
            policy,
            slots: Vec::new(),
            log: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>) -> usize {
        self.slots.push(Slot {
            name: name.into(),
            status: WorkerStatus::Running,
            recent: VecDeque::new(),
            restarts: 0,
        });
        self.slots.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.slots.iter().position(|s| s.name == name)
    }

    pub fn status(&self, idx: usize) -> WorkerStatus {
        self.slots[idx].status
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.slots[idx].name
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Records a crash and schedules a restart, or gives up once the
    /// restart budget for the window is spent.
    pub fn crashed(&mut self, idx: usize, cause: impl Into<String>, now: Timestamp) -> WorkerStatus {
        let policy = self.policy;
        let slot = &mut self.slots[idx];
        let cause = cause.into();
        log::warn!("worker {} crashed: {cause}", slot.name);
        self.log.push(RestartEvent {
            worker: slot.name.clone(),
            crashed_at: now,
            cause,
        });
        while slot
            .recent
            .front()
            .is_some_and(|t| now.saturating_sub(*t) >= policy.window)
        {
            slot.recent.pop_front();
        }
        slot.status = if slot.recent.len() >= policy.max_restarts {
            log::error!("worker {} gave up after {} restarts", slot.name, slot.recent.len());
            WorkerStatus::GaveUp { at: now }
        } else {
            WorkerStatus::Restarting {
                at: now + policy.delay,
            }
        };
        slot.status
    }

    /// Workers whose restart time has come; they are marked running.
    pub fn due_restarts(&mut self, now: Timestamp) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, s) in self.slots.iter_mut().enumerate() {
            if let WorkerStatus::Restarting { at } = s.status {
                if at <= now {
                    s.status = WorkerStatus::Running;
                    s.recent.push_back(now);
                    s.restarts += 1;
                    out.push(i);
                }
            }
        }
        out
    }

    pub fn poll_timeout(&self) -> Option<Timestamp> {
        self.slots
            .iter()
            .filter_map(|s| match s.status {
                WorkerStatus::Restarting { at } => Some(at),
                _ => None,
            })
            .min()
    }

    pub fn log(&self) -> &[RestartEvent] {
        &self.log
    }

    pub fn total_restarts(&self) -> u64 {
        self.slots.iter().map(|s| s.restarts).sum()
    }

    pub fn health(&self) -> Vec<WorkerHealth> {
        self.slots
            .iter()
            .map(|s| WorkerHealth {
                name: s.name.clone(),
                status: s.status,
                restarts: s.restarts,
            })
            .collect()
    }

    pub fn any_gave_up(&self) -> bool {
        self.slots
            .iter()
            .any(|s| matches!(s.status, WorkerStatus::GaveUp { .. }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn restart_within_a_second() {
        let mut s = Supervisor::new(RestartPolicy::default());
        let w = s.add("storage-1");
        assert_eq!(
            s.crashed(w, "killed", Timestamp(1000)),
            WorkerStatus::Restarting { at: Timestamp(1500) }
        );
        assert!(s.due_restarts(Timestamp(1499)).is_empty());
        assert_eq!(s.due_restarts(Timestamp(1500)), vec![w]);
        assert_eq!(s.status(w), WorkerStatus::Running);
        assert_eq!(s.log()[0].cause, "killed");
    }

    #[test]
    fn gives_up_after_ten_in_a_minute() {
        let mut s = Supervisor::new(RestartPolicy::default());
        let w = s.add("loop");
        let mut now = Timestamp(0);
        for _ in 0..10 {
            assert!(matches!(s.crashed(w, "boom", now), WorkerStatus::Restarting { .. }));
            now = now + Duration::from_millis(500);
            s.due_restarts(now);
        }
        assert_eq!(s.crashed(w, "boom", now), WorkerStatus::GaveUp { at: now });
        assert!(s.any_gave_up());
    }

    #[test]
    fn old_restarts_age_out() {
        let mut s = Supervisor::new(RestartPolicy::default());
        let w = s.add("slow");
        let mut now = Timestamp(0);
        for _ in 0..30 {
            assert!(matches!(s.crashed(w, "boom", now), WorkerStatus::Restarting { .. }));
            now = now + Duration::from_secs(7);
            s.due_restarts(now);
        }
        assert_eq!(s.total_restarts(), 30);
    }

    #[test]
    fn healthy_run_has_no_restarts() {
        let mut s = Supervisor::new(RestartPolicy::default());
        s.add("a");
        assert!(s.due_restarts(Timestamp(10_000)).is_empty());
        assert_eq!(s.total_restarts(), 0);
    }
}
