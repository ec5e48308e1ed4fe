use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::time::Duration;

use super::model::ObjectModel;
use super::{
    encode_records, format_links, Link, Lwm2mError, LwPath, Record, DEVICE_CURRENT_TIME,
    OBJ_DEVICE,
};
use crate::clock::Timestamp;
use crate::coap::{content_format, Code, CoapMessage, MessageType, Messenger};

const REGISTER_RETRY: Duration = Duration::from_secs(5);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClientState {
    Unregistered,
    Registering,
    Registered,
    Deregistering,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ClientEvent {
    Registered { registration_id: String },
    RegistrationFailed,
    Deregistered,
    Written { path: LwPath, text: String },
    Executed { path: LwPath },
    ObserveStarted { path: LwPath },
    ObserveCancelled { path: LwPath },
    /// Server wrote unix seconds to /3/0/13.
    TimeSync { server_time: Timestamp },
}

#[derive(Debug)]
struct ClientObservation {
    token: Vec<u8>,
    peer: SocketAddr,
    period: Duration,
    next_due: Timestamp,
    seq: u32,
}

#[derive(Debug)]
pub struct Lwm2mClient {
    pub endpoint: String,
    pub lifetime_s: u32,
    pub model: ObjectModel,
    server: SocketAddr,
    state: ClientState,
    registration_id: Option<String>,
    reg_token: Option<Vec<u8>>,
    next_update: Option<Timestamp>,
    retry_at: Option<Timestamp>,
    observations: BTreeMap<LwPath, ClientObservation>,
    firmware_version: String,
}

impl Lwm2mClient {
    pub fn new(
        endpoint: impl Into<String>,
        lifetime_s: u32,
        model: ObjectModel,
        server: SocketAddr,
        firmware_version: impl Into<String>,
    ) -> Self {
        Lwm2mClient {
            endpoint: endpoint.into(),
            lifetime_s,
            model,
            server,
            state: ClientState::Unregistered,
            registration_id: None,
            reg_token: None,
            next_update: None,
            retry_at: None,
            observations: BTreeMap::new(),
            firmware_version: firmware_version.into(),
        }
    }

    pub fn state(&self) -> ClientState {
        self.state
    }

    pub fn registration_id(&self) -> Option<&str> {
        self.registration_id.as_deref()
    }

    pub fn firmware_version(&self) -> &str {
        &self.firmware_version
    }

    pub fn set_firmware_version(&mut self, v: impl Into<String>) {
        self.firmware_version = v.into();
    }

    pub fn links(&self) -> Vec<Link> {
        let mut links = self.model.links();
        for l in &mut links {
            if l.path == LwPath::instance(OBJ_DEVICE, 0) {
                l.attrs.push(("fw".into(), self.firmware_version.clone()));
            }
        }
        links
    }

    pub fn register(&mut self, now: Timestamp, m: &mut Messenger) {
        let mut req = CoapMessage::request(MessageType::Con, Code::POST, "/rd")
            .with_payload(format_links(&self.links()).into_bytes());
        req.add_query("ep", &self.endpoint);
        req.add_query("lt", self.lifetime_s);
        req.set_content_format(content_format::LINK_FORMAT);
        self.send_reg(req, now, m);
        self.state = ClientState::Registering;
        self.retry_at = None;
    }

    fn send_reg(&mut self, req: CoapMessage, now: Timestamp, m: &mut Messenger) {
        match m.send_request(self.server, req, now) {
            Ok(t) => self.reg_token = Some(t),
            Err(e) => log::warn!("{}: registration request failed: {e}", self.endpoint),
        }
    }

    pub fn deregister(&mut self, now: Timestamp, m: &mut Messenger) {
        if let Some(id) = self.registration_id.clone() {
            let req = CoapMessage::request(MessageType::Con, Code::DELETE, &format!("/rd/{id}"));
            self.send_reg(req, now, m);
            self.state = ClientState::Deregistering;
        }
        self.observations.clear();
        self.next_update = None;
    }

    /// Drops all session state without telling the server (power loss).
    pub fn reset(&mut self) {
        self.state = ClientState::Unregistered;
        self.registration_id = None;
        self.reg_token = None;
        self.next_update = None;
        self.retry_at = None;
        self.observations.clear();
    }

    fn update_interval(&self) -> Duration {
        Duration::from_millis(self.lifetime_s as u64 * 500)
    }

    pub fn poll_timeout(&self) -> Option<Timestamp> {
        let obs = self.observations.values().map(|o| o.next_due).min();
        [obs, self.next_update, self.retry_at]
            .into_iter()
            .flatten()
            .min()
    }

    /// Sends a registration update or retries registration when due.
    pub fn handle_timeout(&mut self, now: Timestamp, m: &mut Messenger) {
        if self.retry_at.is_some_and(|t| t <= now) {
            self.register(now, m);
        }
        if self.state == ClientState::Registered && self.next_update.is_some_and(|t| t <= now) {
            let id = self.registration_id.clone().expect("registered");
            let req = CoapMessage::request(MessageType::Con, Code::POST, &format!("/rd/{id}"));
            self.send_reg(req, now, m);
            self.next_update = Some(now + self.update_interval());
        }
    }

    /// Observed paths whose notification is due at `now`.
    pub fn due(&self, now: Timestamp) -> Vec<LwPath> {
        self.observations
            .iter()
            .filter(|(_, o)| o.next_due <= now)
            .map(|(p, _)| *p)
            .collect()
    }

    pub fn observed(&self) -> Vec<LwPath> {
        self.observations.keys().copied().collect()
    }

    /// Sends the current value of `path` as a NON notification stamped with
    /// `device_time`, then schedules the next one.
    pub fn notify(
        &mut self,
        path: LwPath,
        device_time: Timestamp,
        m: &mut Messenger,
    ) -> Result<(), Lwm2mError> {
        let obs = self
            .observations
            .get_mut(&path)
            .ok_or_else(|| Lwm2mError::PathNotFound(path.to_string()))?;
        obs.next_due = obs.next_due + obs.period;
        obs.seq += 1;
        let (token, peer, seq) = (obs.token.clone(), obs.peer, obs.seq);
        let values = self.model.read(path)?;
        let t = Some(device_time.as_secs_f64());
        let records: Vec<Record> = values
            .iter()
            .map(|(p, v)| Record::from_value(*p, v, t))
            .collect();
        let mut msg = CoapMessage::new(MessageType::Non, Code::CONTENT, 0)
            .with_token(&token)
            .with_payload(encode_records(&records));
        msg.set_observe(seq);
        msg.set_content_format(content_format::JSON);
        m.send_non(peer, msg)
            .map_err(|e| Lwm2mError::BadPayload(e.to_string()))
    }

    /// Advances a due observation without sending (a silent sensor).
    pub fn skip(&mut self, path: LwPath) {
        if let Some(o) = self.observations.get_mut(&path) {
            o.next_due = o.next_due + o.period;
        }
    }

    pub fn handle_response(
        &mut self,
        token: &[u8],
        msg: &CoapMessage,
        now: Timestamp,
    ) -> Option<ClientEvent> {
        if self.reg_token.as_deref() != Some(token) {
            return None;
        }
        self.reg_token = None;
        match (self.state, msg.code) {
            (ClientState::Registering, Code::CREATED) => {
                let id = String::from_utf8_lossy(&msg.payload).into_owned();
                self.registration_id = Some(id.clone());
                self.state = ClientState::Registered;
                self.next_update = Some(now + self.update_interval());
                Some(ClientEvent::Registered {
                    registration_id: id,
                })
            }
            (ClientState::Registering, _) => self.fail(now),
            (ClientState::Deregistering, _) => {
                self.reset();
                Some(ClientEvent::Deregistered)
            }
            (ClientState::Registered, Code::NOT_FOUND) => {
                // server forgot us; start over
                self.reset();
                self.retry_at = Some(now);
                None
            }
            _ => None,
        }
    }

    pub fn handle_failure(&mut self, token: &[u8], now: Timestamp) -> Option<ClientEvent> {
        if self.reg_token.as_deref() != Some(token) {
            return None;
        }
        self.reg_token = None;
        match self.state {
            ClientState::Registering => self.fail(now),
            ClientState::Deregistering => {
                self.reset();
                Some(ClientEvent::Deregistered)
            }
            _ => None,
        }
    }

    fn fail(&mut self, now: Timestamp) -> Option<ClientEvent> {
        self.reset();
        self.retry_at = Some(now + REGISTER_RETRY);
        Some(ClientEvent::RegistrationFailed)
    }

    /// Serves a device-management or observe request.
    pub fn handle_request(
        &mut self,
        peer: SocketAddr,
        req: &CoapMessage,
        now: Timestamp,
        m: &mut Messenger,
    ) -> Option<ClientEvent> {
        let path: LwPath = match req.path().parse() {
            Ok(p) => p,
            Err(_) => {
                let _ = m.respond(peer, req, CoapMessage::response_to(req, Code::NOT_FOUND));
                return None;
            }
        };
        let (resp, event) = match req.code {
            Code::GET => self.get(peer, req, path, now),
            Code::PUT => {
                let text = String::from_utf8_lossy(&req.payload).into_owned();
                match self.model.write_text(path, &text) {
                    Ok(_) => {
                        let ev = if path == LwPath::resource(OBJ_DEVICE, 0, DEVICE_CURRENT_TIME) {
                            text.trim().parse::<f64>().ok().map(|s| ClientEvent::TimeSync {
                                server_time: Timestamp::from_secs_f64(s),
                            })
                        } else {
                            Some(ClientEvent::Written { path, text })
                        };
                        (CoapMessage::response_to(req, Code::CHANGED), ev)
                    }
                    Err(e) => (error_response(req, &e), None),
                }
            }
            Code::POST => match self.model.check_execute(path) {
                Ok(()) => (
                    CoapMessage::response_to(req, Code::CHANGED),
                    Some(ClientEvent::Executed { path }),
                ),
                Err(e) => (error_response(req, &e), None),
            },
            _ => (CoapMessage::response_to(req, Code::METHOD_NOT_ALLOWED), None),
        };
        if let Err(e) = m.respond(peer, req, resp) {
            log::warn!("{}: response failed: {e}", self.endpoint);
        }
        event
    }

    fn get(
        &mut self,
        peer: SocketAddr,
        req: &CoapMessage,
        path: LwPath,
        now: Timestamp,
    ) -> (CoapMessage, Option<ClientEvent>) {
        match req.observe() {
            Some(0) => {
                if let Err(e) = self.model.read(path) {
                    return (error_response(req, &e), None);
                }
                let secs: f64 = req
                    .query("pmax")
                    .or_else(|| req.query("pmin"))
                    .and_then(|v| v.parse().ok())
                    .filter(|s: &f64| *s > 0.0)
                    .unwrap_or(10.0);
                let period = Duration::from_millis((secs * 1000.0).round() as u64);
                self.observations.insert(
                    path,
                    ClientObservation {
                        token: req.token.clone(),
                        peer,
                        period,
                        next_due: next_tick(now, period),
                        seq: 0,
                    },
                );
                let mut resp = CoapMessage::response_to(req, Code::CONTENT);
                resp.set_observe(0);
                (resp, Some(ClientEvent::ObserveStarted { path }))
            }
            obs => {
                let cancelled = obs == Some(1) && self.observations.remove(&path).is_some();
                match self.model.read(path) {
                    Ok(values) => {
                        let records: Vec<Record> = values
                            .iter()
                            .map(|(p, v)| Record::from_value(*p, v, None))
                            .collect();
                        let mut resp = CoapMessage::response_to(req, Code::CONTENT)
                            .with_payload(encode_records(&records));
                        resp.set_content_format(content_format::JSON);
                        (
                            resp,
                            cancelled.then_some(ClientEvent::ObserveCancelled { path }),
                        )
                    }
                    Err(e) => (error_response(req, &e), None),
                }
            }
        }
    }
}

fn error_response(req: &CoapMessage, e: &Lwm2mError) -> CoapMessage {
    let code = match e {
        Lwm2mError::PathNotFound(_) => Code::NOT_FOUND,
        Lwm2mError::NotWritable(_) | Lwm2mError::NotExecutable(_) => Code::METHOD_NOT_ALLOWED,
        _ => Code::BAD_REQUEST,
    };
    CoapMessage::response_to(req, code)
}

/// First multiple of `period` strictly after `now`, so devices sharing a
/// period sample at the same instants.
fn next_tick(now: Timestamp, period: Duration) -> Timestamp {
    let p = period.as_millis().max(1) as i64;
    Timestamp((now.0.div_euclid(p) + 1) * p)
}

