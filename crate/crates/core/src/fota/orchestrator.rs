use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use serde::Serialize;

use super::client::{UpdateResult, UpdateState};
use super::image_uri;
use crate::clock::Timestamp;
use crate::lwm2m::server::{OpId, OpOutcome};
use crate::lwm2m::{
    decode_records, LwPath, Registration, FW_PACKAGE_URI, FW_RESULT, FW_STATE, FW_UPDATE,
    OBJ_FIRMWARE,
};

pub const POLL_INTERVAL: Duration = Duration::from_secs(1);
pub const PUSH_DEADLINE: Duration = Duration::from_secs(600);

/// Device-management calls the orchestrator needs from the server.
pub trait FotaOps {
    fn write(&mut self, endpoint: &str, path: LwPath, value: &str) -> Option<OpId>;
    fn read(&mut self, endpoint: &str, path: LwPath) -> Option<OpId>;
    fn execute(&mut self, endpoint: &str, path: LwPath) -> Option<OpId>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    WritingUri,
    Downloading,
    Updating,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PushResult {
    Success,
    IntegrityFailure,
    ConnectionLost,
    Timeout,
    NotRegistered,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetProgress {
    pub endpoint: String,
    pub from_version: String,
    pub to_version: String,
    pub phase: Phase,
    pub result: Option<PushResult>,
    pub started_at: Timestamp,
    pub finished_at: Option<Timestamp>,
}

#[derive(Debug)]
struct Target {
    progress: TargetProgress,
    registration_id: String,
    next_poll: Option<Timestamp>,
    deadline: Timestamp,
    in_flight: Option<OpId>,
}

fn fw(r: u16) -> LwPath {
    LwPath::resource(OBJ_FIRMWARE, 0, r)
}

/// Server side of fleet updates: writes the package URI, polls the device
/// state, executes the update and waits for re-registration.
#[derive(Debug, Default)]
pub struct Orchestrator {
    targets: BTreeMap<String, Target>,
    ops: HashMap<OpId, String>,
}

impl Orchestrator {
    pub fn new() -> Self {
        Orchestrator::default()
    }

    /// Starts a push to `targets`, given as `(endpoint, registration)`.
    pub fn push(
        &mut self,
        version: &str,
        targets: Vec<(String, Option<Registration>)>,
        now: Timestamp,
        ops: &mut dyn FotaOps,
    ) {
        for (endpoint, reg) in targets {
            let from_version = reg
                .as_ref()
                .and_then(|r| r.firmware_version())
                .unwrap_or_default()
                .to_string();
            let mut t = Target {
                progress: TargetProgress {
                    endpoint: endpoint.clone(),
                    from_version: from_version.clone(),
                    to_version: version.to_string(),
                    phase: Phase::WritingUri,
                    result: None,
                    started_at: now,
                    finished_at: None,
                },
                registration_id: reg
                    .as_ref()
                    .map(|r| r.registration_id.clone())
                    .unwrap_or_default(),
                next_poll: None,
                deadline: now + PUSH_DEADLINE,
                in_flight: None,
            };
            if let Some(old) = self.targets.remove(&endpoint) {
                if let Some(op) = old.in_flight {
                    self.ops.remove(&op);
                }
            }
            match reg {
                None => finish(&mut t, PushResult::NotRegistered, now),
                Some(_) if from_version == version => finish(&mut t, PushResult::Success, now),
                Some(_) => match ops.write(&endpoint, fw(FW_PACKAGE_URI), &image_uri(version)) {
                    Some(op) => {
                        t.in_flight = Some(op);
                        self.ops.insert(op, endpoint.clone());
                    }
                    None => finish(&mut t, PushResult::NotRegistered, now),
                },
            }
            self.targets.insert(endpoint, t);
        }
    }

    pub fn owns(&self, op: OpId) -> bool {
        self.ops.contains_key(&op)
    }

    pub fn on_op_completed(&mut self, op: OpId, outcome: &OpOutcome, now: Timestamp, ops: &mut dyn FotaOps) {
        let Some(ep) = self.ops.remove(&op) else {
            return;
        };
        let Some(t) = self.targets.get_mut(&ep) else {
            return;
        };
        if t.in_flight != Some(op) {
            return;
        }
        t.in_flight = None;
        match t.progress.phase {
            Phase::WritingUri => {
                if outcome.is_success() {
                    t.progress.phase = Phase::Downloading;
                    t.next_poll = Some(now + POLL_INTERVAL);
                } else if matches!(outcome, OpOutcome::Timeout) {
                    finish(t, PushResult::Timeout, now);
                } else {
                    finish(t, PushResult::ConnectionLost, now);
                }
            }
            Phase::Downloading => {
                let (state, result) = parse_status(outcome);
                match (state, result) {
                    (Some(UpdateState::Downloaded), _) => {
                        match ops.execute(&ep, fw(FW_UPDATE)) {
                            Some(op) => {
                                t.progress.phase = Phase::Updating;
                                t.in_flight = Some(op);
                                self.ops.insert(op, ep);
                            }
                            None => finish(t, PushResult::ConnectionLost, now),
                        }
                    }
                    (Some(UpdateState::Idle), Some(UpdateResult::IntegrityFailure)) => {
                        finish(t, PushResult::IntegrityFailure, now)
                    }
                    (Some(UpdateState::Idle), Some(UpdateResult::ConnectionLost)) => {
                        finish(t, PushResult::ConnectionLost, now)
                    }
                    _ => t.next_poll = Some(now + POLL_INTERVAL),
                }
            }
            Phase::Updating => {
                // the execute reply; completion arrives as a re-registration
                if !outcome.is_success() && !matches!(outcome, OpOutcome::Timeout) {
                    finish(t, PushResult::ConnectionLost, now);
                }
            }
            Phase::Done => {}
        }
    }

    /// A (re-)registration or update for an endpoint.
    pub fn on_registration(&mut self, reg: &Registration, now: Timestamp) {
        let Some(t) = self.targets.get_mut(&reg.endpoint) else {
            return;
        };
        let running = reg.firmware_version().unwrap_or_default();
        match t.progress.phase {
            Phase::Updating if reg.registration_id != t.registration_id => {
                let result = if running == t.progress.to_version {
                    PushResult::Success
                } else {
                    PushResult::IntegrityFailure
                };
                finish(t, result, now);
            }
            Phase::WritingUri | Phase::Downloading if reg.registration_id != t.registration_id => {
                finish(t, PushResult::ConnectionLost, now);
            }
            _ => {}
        }
        if let Some(op) = t.in_flight.filter(|_| t.progress.phase == Phase::Done) {
            self.ops.remove(&op);
            t.in_flight = None;
        }
    }

    pub fn poll_timeout(&self) -> Option<Timestamp> {
        self.targets
            .values()
            .filter(|t| t.progress.phase != Phase::Done)
            .map(|t| match (t.in_flight, t.next_poll) {
                (None, Some(p)) => p.min(t.deadline),
                _ => t.deadline,
            })
            .min()
    }

    pub fn handle_timeout(&mut self, now: Timestamp, ops: &mut dyn FotaOps) {
        for (ep, t) in self.targets.iter_mut() {
            if t.progress.phase == Phase::Done {
                continue;
            }
            if now >= t.deadline {
                if let Some(op) = t.in_flight.take() {
                    self.ops.remove(&op);
                }
                finish(t, PushResult::Timeout, now);
                continue;
            }
            if t.in_flight.is_none() && t.next_poll.is_some_and(|p| p <= now) {
                t.next_poll = None;
                match ops.read(ep, LwPath::instance(OBJ_FIRMWARE, 0)) {
                    Some(op) => {
                        t.in_flight = Some(op);
                        self.ops.insert(op, ep.clone());
                    }
                    None => t.next_poll = Some(now + POLL_INTERVAL),
                }
            }
        }
    }

    pub fn progress(&self) -> Vec<TargetProgress> {
        self.targets.values().map(|t| t.progress.clone()).collect()
    }

    pub fn result_of(&self, endpoint: &str) -> Option<PushResult> {
        self.targets.get(endpoint)?.progress.result
    }

    pub fn is_done(&self) -> bool {
        self.targets.values().all(|t| t.progress.phase == Phase::Done)
    }
}

fn finish(t: &mut Target, result: PushResult, now: Timestamp) {
    t.progress.phase = Phase::Done;
    t.progress.result = Some(result);
    t.progress.finished_at = Some(now);
    t.next_poll = None;
}

fn parse_status(outcome: &OpOutcome) -> (Option<UpdateState>, Option<UpdateResult>) {
    let OpOutcome::Response(msg) = outcome else {
        return (None, None);
    };
    if !msg.code.is_success() {
        return (None, None);
    }
    let Ok(records) = decode_records(&msg.payload) else {
        return (None, None);
    };
    let mut state = None;
    let mut result = None;
    for r in records {
        let Ok(p) = r.path() else { continue };
        let Some(v) = r.v else { continue };
        if p == fw(FW_STATE) {
            state = UpdateState::from_code(v as i64);
        } else if p == fw(FW_RESULT) {
            result = UpdateResult::from_code(v as i64);
        }
    }
    (state, result)
}
