use std::collections::HashMap;
use std::net::SocketAddr;
use std::time::Duration;

use serde::Serialize;

use super::registry::{DeregReason, Registration, Registry};
use super::{Lwm2mError, LwPath};
use crate::clock::Timestamp;
use crate::coap::{content_format, Code, CoapMessage, MessageType, Messenger};

pub const DEFAULT_LIFETIME_S: u32 = 300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct OpId(pub u64);

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Read(LwPath),
    Write(LwPath, String),
    Execute(LwPath),
    Observe(LwPath),
    Cancel(LwPath),
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpOutcome {
    Response(CoapMessage),
    Timeout,
    Reset,
}

impl OpOutcome {
    pub fn is_success(&self) -> bool {
        matches!(self, OpOutcome::Response(m) if m.code.is_success())
    }

    pub fn payload_text(&self) -> Option<String> {
        match self {
            OpOutcome::Response(m) => Some(String::from_utf8_lossy(&m.payload).into_owned()),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ServerEvent {
    Registered {
        registration: Registration,
        replaced: Option<Registration>,
    },
    Updated {
        registration: Registration,
    },
    Deregistered {
        registration: Registration,
        reason: DeregReason,
    },
    Notification {
        endpoint: String,
        path: LwPath,
        payload: Vec<u8>,
        seq: u32,
    },
    OpCompleted {
        op: OpId,
        endpoint: String,
        kind: OpKind,
        outcome: OpOutcome,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ObservationInfo {
    pub endpoint: String,
    pub path: LwPath,
    pub notify_period_s: f64,
    pub active: bool,
}

#[derive(Debug)]
struct Observation {
    token: Vec<u8>,
    peer: SocketAddr,
    period: Duration,
    active: bool,
}

#[derive(Debug)]
struct PendingOp {
    id: OpId,
    endpoint: String,
    kind: OpKind,
}

/// Registration interface plus observe and device-management requests.
/// Transmission goes through the caller's [`Messenger`].
#[derive(Debug, Default)]
pub struct Lwm2mServer {
    pub registry: Registry,
    observations: HashMap<(String, LwPath), Observation>,
    by_token: HashMap<(SocketAddr, Vec<u8>), (String, LwPath)>,
    pending: HashMap<(SocketAddr, Vec<u8>), PendingOp>,
    next_op: u64,
}

fn text(code: Code, req: &CoapMessage, body: impl Into<Vec<u8>>) -> CoapMessage {
    let mut m = CoapMessage::response_to(req, code).with_payload(body);
    if !m.payload.is_empty() {
        m.set_content_format(content_format::TEXT_PLAIN);
    }
    m
}

impl Lwm2mServer {
    pub fn new() -> Self {
        Lwm2mServer::default()
    }

    /// Handles requests under `/rd`. Returns `None` for any other path.
    pub fn handle_request(
        &mut self,
        peer: SocketAddr,
        req: &CoapMessage,
        now: Timestamp,
        m: &mut Messenger,
    ) -> Option<Vec<ServerEvent>> {
        let path = req.path();
        let segs: Vec<&str> = path.split('/').filter(|s| !s.is_empty()).collect();
        if segs.first() != Some(&"rd") {
            return None;
        }
        let mut events = Vec::new();
        let resp = match (req.code, segs.len()) {
            (Code::POST, 1) => {
                let lifetime = req
                    .query("lt")
                    .and_then(|v| v.parse().ok())
                    .unwrap_or(DEFAULT_LIFETIME_S);
                match req.query("ep") {
                    None => text(Code::BAD_REQUEST, req, "missing ep"),
                    Some(ep) => {
                        let links = String::from_utf8_lossy(&req.payload);
                        match self.registry.register(&ep, lifetime, &links, peer, now) {
                            Ok((reg, replaced)) => {
                                if let Some(old) = &replaced {
                                    self.drop_endpoint(&old.endpoint);
                                }
                                let r = text(Code::CREATED, req, reg.registration_id.clone());
                                events.push(ServerEvent::Registered {
                                    registration: reg,
                                    replaced,
                                });
                                r
                            }
                            Err(e) => text(Code::BAD_REQUEST, req, e.to_string()),
                        }
                    }
                }
            }
            (Code::POST, 2) => {
                let lifetime = req.query("lt").and_then(|v| v.parse().ok());
                let links = (!req.payload.is_empty())
                    .then(|| String::from_utf8_lossy(&req.payload).into_owned());
                match self
                    .registry
                    .update(segs[1], lifetime, links.as_deref(), peer, now)
                {
                    Ok(reg) => {
                        events.push(ServerEvent::Updated {
                            registration: reg.clone(),
                        });
                        text(Code::CHANGED, req, "")
                    }
                    Err(Lwm2mError::UnknownRegistration(_)) => text(Code::NOT_FOUND, req, ""),
                    Err(e) => text(Code::BAD_REQUEST, req, e.to_string()),
                }
            }
            (Code::DELETE, 2) => match self.registry.deregister(segs[1]) {
                Ok(reg) => {
                    self.drop_endpoint(&reg.endpoint);
                    events.push(ServerEvent::Deregistered {
                        registration: reg,
                        reason: DeregReason::Explicit,
                    });
                    text(Code::DELETED, req, "")
                }
                Err(_) => text(Code::NOT_FOUND, req, ""),
            },
            _ => text(Code::METHOD_NOT_ALLOWED, req, ""),
        };
        if let Err(e) = m.respond(peer, req, resp) {
            log::warn!("rd response failed: {e}");
        }
        Some(events)
    }

    /// Expires lapsed registrations.
    pub fn expire(&mut self, now: Timestamp) -> Vec<ServerEvent> {
        self.registry
            .expire(now)
            .into_iter()
            .map(|reg| {
                self.drop_endpoint(&reg.endpoint);
                ServerEvent::Deregistered {
                    registration: reg,
                    reason: DeregReason::Expired,
                }
            })
            .collect()
    }

    pub fn next_expiry(&self) -> Option<Timestamp> {
        self.registry.next_expiry()
    }

    /// Forgets observation and op state for `endpoint`.
    pub fn drop_endpoint(&mut self, endpoint: &str) {
        self.observations.retain(|(ep, _), _| ep != endpoint);
        self.by_token.retain(|_, (ep, _)| ep != endpoint);
        self.pending.retain(|_, p| p.endpoint != endpoint);
    }

    fn target(&self, endpoint: &str) -> Result<&Registration, Lwm2mError> {
        self.registry
            .by_endpoint(endpoint)
            .ok_or_else(|| Lwm2mError::NotRegistered(endpoint.into()))
    }

    fn send(
        &mut self,
        endpoint: &str,
        msg: CoapMessage,
        kind: OpKind,
        now: Timestamp,
        m: &mut Messenger,
    ) -> Result<(OpId, Vec<u8>), Lwm2mError> {
        let peer = self.target(endpoint)?.address;
        let token = m
            .send_request(peer, msg, now)
            .map_err(|e| Lwm2mError::BadPayload(e.to_string()))?;
        self.next_op += 1;
        let id = OpId(self.next_op);
        self.pending.insert(
            (peer, token.clone()),
            PendingOp {
                id,
                endpoint: endpoint.to_string(),
                kind,
            },
        );
        Ok((id, token))
    }

    fn check_advertised(&self, endpoint: &str, path: LwPath) -> Result<SocketAddr, Lwm2mError> {
        let reg = self.target(endpoint)?;
        let advertised = reg
            .links
            .iter()
            .any(|l| l.path.object == path.object && l.path.instance == path.instance);
        if !advertised {
            return Err(Lwm2mError::PathNotFound(path.to_string()));
        }
        Ok(reg.address)
    }

    /// Starts (or restarts) an observation with `pmin = pmax = period`.
    pub fn observe(
        &mut self,
        endpoint: &str,
        path: LwPath,
        period: Duration,
        now: Timestamp,
        m: &mut Messenger,
    ) -> Result<OpId, Lwm2mError> {
        let peer = self.check_advertised(endpoint, path)?;
        if let Some(old) = self.observations.remove(&(endpoint.to_string(), path)) {
            self.by_token.remove(&(old.peer, old.token));
        }
        let mut req = CoapMessage::request(MessageType::Con, Code::GET, &path.to_string());
        req.set_observe(0);
        let secs = period.as_secs_f64();
        req.add_query("pmin", secs);
        req.add_query("pmax", secs);
        let (id, token) = self.send(endpoint, req, OpKind::Observe(path), now, m)?;
        self.by_token
            .insert((peer, token.clone()), (endpoint.to_string(), path));
        self.observations.insert(
            (endpoint.to_string(), path),
            Observation {
                token,
                peer,
                period,
                active: false,
            },
        );
        Ok(id)
    }

    pub fn cancel_observe(
        &mut self,
        endpoint: &str,
        path: LwPath,
        now: Timestamp,
        m: &mut Messenger,
    ) -> Result<Option<OpId>, Lwm2mError> {
        let Some(obs) = self.observations.remove(&(endpoint.to_string(), path)) else {
            return Ok(None);
        };
        self.by_token.remove(&(obs.peer, obs.token.clone()));
        if self.registry.by_endpoint(endpoint).is_none() {
            return Ok(None);
        }
        let mut req = CoapMessage::request(MessageType::Con, Code::GET, &path.to_string())
            .with_token(&obs.token);
        req.set_observe(1);
        // the original observe may still be in flight under this token
        self.pending.remove(&(obs.peer, obs.token));
        Ok(Some(self.send(endpoint, req, OpKind::Cancel(path), now, m)?.0))
    }

    pub fn read(
        &mut self,
        endpoint: &str,
        path: LwPath,
        now: Timestamp,
        m: &mut Messenger,
    ) -> Result<OpId, Lwm2mError> {
        self.check_advertised(endpoint, path)?;
        let req = CoapMessage::request(MessageType::Con, Code::GET, &path.to_string());
        Ok(self.send(endpoint, req, OpKind::Read(path), now, m)?.0)
    }

    pub fn write(
        &mut self,
        endpoint: &str,
        path: LwPath,
        value: &str,
        now: Timestamp,
        m: &mut Messenger,
    ) -> Result<OpId, Lwm2mError> {
        self.check_advertised(endpoint, path)?;
        let mut req = CoapMessage::request(MessageType::Con, Code::PUT, &path.to_string())
            .with_payload(value.as_bytes().to_vec());
        req.set_content_format(content_format::TEXT_PLAIN);
        Ok(self
            .send(endpoint, req, OpKind::Write(path, value.into()), now, m)?
            .0)
    }

    pub fn execute(
        &mut self,
        endpoint: &str,
        path: LwPath,
        now: Timestamp,
        m: &mut Messenger,
    ) -> Result<OpId, Lwm2mError> {
        self.check_advertised(endpoint, path)?;
        let req = CoapMessage::request(MessageType::Con, Code::POST, &path.to_string());
        Ok(self.send(endpoint, req, OpKind::Execute(path), now, m)?.0)
    }

    /// Consumes a response or notification matched by the messenger.
    pub fn handle_response(
        &mut self,
        peer: SocketAddr,
        token: &[u8],
        msg: CoapMessage,
    ) -> Option<ServerEvent> {
        let key = (peer, token.to_vec());
        let is_op_reply = msg.mtype == MessageType::Ack || msg.observe().is_none();
        if is_op_reply {
            if let Some(op) = self.pending.remove(&key) {
                if let OpKind::Observe(path) = &op.kind {
                    let obs_key = (op.endpoint.clone(), *path);
                    if msg.code.is_success() && msg.observe().is_some() {
                        if let Some(o) = self.observations.get_mut(&obs_key) {
                            o.active = true;
                        }
                    } else {
                        self.observations.remove(&obs_key);
                        self.by_token.remove(&key);
                    }
                }
                return Some(ServerEvent::OpCompleted {
                    op: op.id,
                    endpoint: op.endpoint,
                    kind: op.kind,
                    outcome: OpOutcome::Response(msg),
                });
            }
        }
        let (endpoint, path) = self.by_token.get(&key)?.clone();
        let seq = msg.observe()?;
        Some(ServerEvent::Notification {
            endpoint,
            path,
            payload: msg.payload,
            seq,
        })
    }

    /// A confirmable request timed out or was reset.
    pub fn handle_failure(
        &mut self,
        peer: SocketAddr,
        token: &[u8],
        outcome: OpOutcome,
    ) -> Option<ServerEvent> {
        let key = (peer, token.to_vec());
        let op = self.pending.remove(&key)?;
        if let OpKind::Observe(path) = &op.kind {
            self.observations.remove(&(op.endpoint.clone(), *path));
            self.by_token.remove(&key);
        }
        Some(ServerEvent::OpCompleted {
            op: op.id,
            endpoint: op.endpoint,
            kind: op.kind,
            outcome,
        })
    }

    pub fn is_observed(&self, endpoint: &str, path: LwPath) -> bool {
        self.observations
            .contains_key(&(endpoint.to_string(), path))
    }

    pub fn observations(&self) -> Vec<ObservationInfo> {
        let mut v: Vec<_> = self
            .observations
            .iter()
            .map(|((ep, p), o)| ObservationInfo {
                endpoint: ep.clone(),
                path: *p,
                notify_period_s: o.period.as_secs_f64(),
                active: o.active,
            })
            .collect();
        v.sort_by(|a, b| (&a.endpoint, a.path).cmp(&(&b.endpoint, b.path)));
        v
    }

    pub fn observations_of(&self, endpoint: &str) -> Vec<LwPath> {
        let mut v: Vec<_> = self
            .observations
            .keys()
            .filter(|(ep, _)| ep == endpoint)
            .map(|(_, p)| *p)
            .collect();
        v.sort();
        v
    }
}
