//! Reliable request/response and observe messaging over an abstract datagram
//! channel.
//!
//! [`Messenger`] is a sans-IO state machine: the owner feeds it datagrams and
//! timer expirations and drains outgoing datagrams and [`ExchangeEvent`]s.
//! All deadlines are expressed in [`Timestamp`]s so the same code runs on a
//! virtual or a real clock.

use std::collections::{HashMap, VecDeque};
use std::net::{SocketAddr, UdpSocket};
use std::time::Duration;

use super::{decode, encode, CoapError, CoapMessage, Code, MessageType};
use crate::clock::{Clock, Timestamp, VirtualClock};

/// Dedup window for inbound message IDs.
pub const EXCHANGE_LIFETIME: Duration = Duration::from_secs(247);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetransmitParams {
    pub ack_timeout: Duration,
    pub backoff: f64,
    pub max_retransmit: u32,
}

impl Default for RetransmitParams {
    fn default() -> Self {
        RetransmitParams {
            ack_timeout: Duration::from_secs(2),
            backoff: 1.5,
            max_retransmit: 4,
        }
    }
}

impl RetransmitParams {
    /// Wait before the `n`th retransmission (n = 0 is the initial send's timer).
    pub fn timeout_for(&self, n: u32) -> Duration {
        let ms = self.ack_timeout.as_millis() as f64 * self.backoff.powi(n as i32);
        Duration::from_millis(ms.round() as u64)
    }

    /// Time from first transmission until a silent peer is declared timed out.
    pub fn total_wait(&self) -> Duration {
        (0..=self.max_retransmit).map(|n| self.timeout_for(n)).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExchangeEvent {
    /// Inbound request, delivered at most once per (peer, message id).
    Request { peer: SocketAddr, msg: CoapMessage },
    /// Response or notification carrying `token`.
    Response {
        peer: SocketAddr,
        token: Vec<u8>,
        msg: CoapMessage,
    },
    /// A confirmable request exhausted its retransmissions.
    Timeout {
        peer: SocketAddr,
        token: Vec<u8>,
        retransmissions: u32,
    },
    Reset { peer: SocketAddr, token: Vec<u8> },
}

#[derive(Debug)]
struct Pending {
    message_id: u16,
    bytes: Vec<u8>,
    retransmissions: u32,
    deadline: Timestamp,
}

#[derive(Debug)]
struct DedupEntry {
    expires: Timestamp,
    response: Option<Vec<u8>>,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MessengerStats {
    pub sent: u64,
    pub retransmissions: u64,
    pub timeouts: u64,
    pub duplicates: u64,
    pub malformed: u64,
}

#[derive(Debug)]
pub struct Messenger {
    params: RetransmitParams,
    next_mid: u16,
    next_token: u32,
    pending: HashMap<(SocketAddr, Vec<u8>), Pending>,
    dedup: HashMap<(SocketAddr, u16), DedupEntry>,
    dedup_order: VecDeque<(Timestamp, SocketAddr, u16)>,
    outbox: VecDeque<(SocketAddr, Vec<u8>)>,
    events: VecDeque<ExchangeEvent>,
    stats: MessengerStats,
}

impl Messenger {
    pub fn new(params: RetransmitParams, seed: u32) -> Self {
        Messenger {
            params,
            next_mid: seed as u16,
            next_token: seed.rotate_left(16),
            pending: HashMap::new(),
            dedup: HashMap::new(),
            dedup_order: VecDeque::new(),
            outbox: VecDeque::new(),
            events: VecDeque::new(),
            stats: MessengerStats::default(),
        }
    }

    pub fn params(&self) -> &RetransmitParams {
        &self.params
    }

    pub fn stats(&self) -> MessengerStats {
        self.stats
    }

    fn fresh_mid(&mut self) -> u16 {
        let m = self.next_mid;
        self.next_mid = self.next_mid.wrapping_add(1);
        m
    }

    pub fn fresh_token(&mut self) -> Vec<u8> {
        let t = self.next_token;
        self.next_token = self.next_token.wrapping_add(1);
        t.to_be_bytes().to_vec()
    }

    /// Sends a CON or NON request. Assigns a message id, and a token if the
    /// message has none. Returns the token used for matching.
    pub fn send_request(
        &mut self,
        peer: SocketAddr,
        mut msg: CoapMessage,
        now: Timestamp,
    ) -> Result<Vec<u8>, CoapError> {
        if !matches!(msg.mtype, MessageType::Con | MessageType::Non) {
            return Err(CoapError::InvalidMessage(
                "requests must be CON or NON".into(),
            ));
        }
        if msg.token.is_empty() {
            msg.token = self.fresh_token();
        }
        msg.message_id = self.fresh_mid();
        let bytes = encode(&msg)?;
        if msg.mtype == MessageType::Con {
            self.pending.insert(
                (peer, msg.token.clone()),
                Pending {
                    message_id: msg.message_id,
                    bytes: bytes.clone(),
                    retransmissions: 0,
                    deadline: now + self.params.timeout_for(0),
                },
            );
        }
        self.push_out(peer, bytes);
        Ok(msg.token)
    }

    /// Sends a NON message (e.g. an observe notification) with a fresh id.
    pub fn send_non(&mut self, peer: SocketAddr, mut msg: CoapMessage) -> Result<(), CoapError> {
        msg.mtype = MessageType::Non;
        msg.message_id = self.fresh_mid();
        let bytes = encode(&msg)?;
        self.push_out(peer, bytes);
        Ok(())
    }

    /// Answers `req`. CON requests get a piggybacked ACK that is cached for
    /// duplicate suppression; NON requests get a NON response.
    pub fn respond(
        &mut self,
        peer: SocketAddr,
        req: &CoapMessage,
        mut resp: CoapMessage,
    ) -> Result<(), CoapError> {
        resp.token = req.token.clone();
        if req.mtype == MessageType::Con {
            resp.mtype = MessageType::Ack;
            resp.message_id = req.message_id;
            let bytes = encode(&resp)?;
            if let Some(entry) = self.dedup.get_mut(&(peer, req.message_id)) {
                entry.response = Some(bytes.clone());
            }
            self.push_out(peer, bytes);
        } else {
            self.send_non(peer, resp)?;
        }
        Ok(())
    }

    pub fn cancel(&mut self, peer: SocketAddr, token: &[u8]) {
        self.pending.remove(&(peer, token.to_vec()));
    }

    /// Forgets all exchange state for `peer` (e.g. after its session is
    /// replaced).
    pub fn forget_peer(&mut self, peer: SocketAddr) {
        self.pending.retain(|(p, _), _| *p != peer);
        self.dedup.retain(|(p, _), _| *p != peer);
    }

    /// Number of confirmable requests awaiting an answer.
    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    fn push_out(&mut self, peer: SocketAddr, bytes: Vec<u8>) {
        self.stats.sent += 1;
        self.outbox.push_back((peer, bytes));
    }

    fn prune_dedup(&mut self, now: Timestamp) {
        while let Some((exp, peer, mid)) = self.dedup_order.front().copied() {
            if exp > now {
                break;
            }
            self.dedup_order.pop_front();
            if self
                .dedup
                .get(&(peer, mid))
                .is_some_and(|e| e.expires <= now)
            {
                self.dedup.remove(&(peer, mid));
            }
        }
    }

    /// Returns true when (peer, mid) was already seen; re-sends any cached
    /// response in that case.
    fn check_duplicate(&mut self, peer: SocketAddr, mid: u16, now: Timestamp) -> bool {
        self.prune_dedup(now);
        if let Some(entry) = self.dedup.get(&(peer, mid)) {
            self.stats.duplicates += 1;
            if let Some(bytes) = entry.response.clone() {
                self.push_out(peer, bytes);
            }
            return true;
        }
        let expires = now + EXCHANGE_LIFETIME;
        self.dedup.insert(
            (peer, mid),
            DedupEntry {
                expires,
                response: None,
            },
        );
        self.dedup_order.push_back((expires, peer, mid));
        false
    }

    pub fn handle_datagram(&mut self, peer: SocketAddr, bytes: &[u8], now: Timestamp) {
        let msg = match decode(bytes) {
            Ok(m) => m,
            Err(_) => {
                self.stats.malformed += 1;
                return;
            }
        };
        match msg.mtype {
            MessageType::Ack | MessageType::Rst => {
                let key = self
                    .pending
                    .iter()
                    .find(|((p, _), pend)| *p == peer && pend.message_id == msg.message_id)
                    .map(|(k, _)| k.clone());
                let Some(key) = key else { return };
                self.pending.remove(&key);
                if msg.mtype == MessageType::Rst {
                    self.events.push_back(ExchangeEvent::Reset { peer, token: key.1 });
                } else if msg.code != Code::EMPTY {
                    self.events.push_back(ExchangeEvent::Response {
                        peer,
                        token: key.1,
                        msg,
                    });
                }
                // Empty ACK: a separate response will follow with the token.
            }
            MessageType::Con | MessageType::Non => {
                if self.check_duplicate(peer, msg.message_id, now) {
                    return;
                }
                if msg.code.is_request() {
                    self.events.push_back(ExchangeEvent::Request { peer, msg });
                } else {
                    if msg.mtype == MessageType::Con {
                        let ack = encode(&CoapMessage::empty_ack(msg.message_id))
                            .expect("empty ack encodes");
                        if let Some(e) = self.dedup.get_mut(&(peer, msg.message_id)) {
                            e.response = Some(ack.clone());
                        }
                        self.push_out(peer, ack);
                    }
                    self.pending.remove(&(peer, msg.token.clone()));
                    self.events.push_back(ExchangeEvent::Response {
                        peer,
                        token: msg.token.clone(),
                        msg,
                    });
                }
            }
        }
    }

    pub fn poll_timeout(&self) -> Option<Timestamp> {
        self.pending.values().map(|p| p.deadline).min()
    }

    pub fn handle_timeout(&mut self, now: Timestamp) {
        let mut due: Vec<(SocketAddr, Vec<u8>)> = self
            .pending
            .iter()
            .filter(|(_, p)| p.deadline <= now)
            .map(|(k, _)| k.clone())
            .collect();
        due.sort();
        for key in due {
            let p = self.pending.get_mut(&key).expect("due key present");
            if p.retransmissions < self.params.max_retransmit {
                p.retransmissions += 1;
                p.deadline = now + self.params.timeout_for(p.retransmissions);
                let bytes = p.bytes.clone();
                self.stats.retransmissions += 1;
                self.push_out(key.0, bytes);
            } else {
                let retransmissions = p.retransmissions;
                self.pending.remove(&key);
                self.stats.timeouts += 1;
                self.events.push_back(ExchangeEvent::Timeout {
                    peer: key.0,
                    token: key.1,
                    retransmissions,
                });
            }
        }
    }

    pub fn poll_transmit(&mut self) -> Option<(SocketAddr, Vec<u8>)> {
        self.outbox.pop_front()
    }

    pub fn poll_event(&mut self) -> Option<ExchangeEvent> {
        self.events.pop_front()
    }

    pub fn has_event(&self) -> bool {
        !self.events.is_empty()
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }
}

/// A datagram channel to a single peer.
pub trait DatagramLink {
    fn peer(&self) -> SocketAddr;
    fn send(&mut self, bytes: &[u8]) -> Result<(), CoapError>;
    /// Waits for a datagram until `deadline`; `Ok(None)` on expiry.
    fn recv_until(&mut self, deadline: Timestamp) -> Result<Option<Vec<u8>>, CoapError>;
}

/// Issues `msg` and waits for the matching response.
///
/// CON requests are retransmitted on the configured schedule and fail with
/// [`CoapError::Timeout`]. NON requests return whatever response is already
/// available, or `None`.
pub fn request<L: DatagramLink>(
    link: &mut L,
    clock: &dyn Clock,
    params: RetransmitParams,
    msg: CoapMessage,
) -> Result<Option<CoapMessage>, CoapError> {
    let peer = link.peer();
    let mut messenger = Messenger::new(params, clock.now().0 as u32);
    let confirmable = msg.mtype == MessageType::Con;
    let token = messenger.send_request(peer, msg, clock.now())?;
    loop {
        while let Some((_, bytes)) = messenger.poll_transmit() {
            link.send(&bytes)?;
        }
        while let Some(ev) = messenger.poll_event() {
            match ev {
                ExchangeEvent::Response { token: t, msg, .. } if t == token => {
                    return Ok(Some(msg))
                }
                ExchangeEvent::Timeout {
                    retransmissions, ..
                } => return Err(CoapError::Timeout { retransmissions }),
                ExchangeEvent::Reset { .. } => {
                    return Err(CoapError::Transport("peer reset the exchange".into()))
                }
                _ => {}
            }
        }
        let deadline = if confirmable {
            match messenger.poll_timeout() {
                Some(d) => d,
                None => continue,
            }
        } else {
            clock.now()
        };
        match link.recv_until(deadline)? {
            Some(bytes) => messenger.handle_datagram(peer, &bytes, clock.now()),
            None if confirmable => messenger.handle_timeout(clock.now()),
            None => return Ok(None),
        }
    }
}

type Responder = Box<dyn FnMut(&[u8]) -> Vec<Vec<u8>> + Send>;

/// In-memory link on a virtual clock. A missing response advances the clock
/// to the caller's deadline.
pub struct MemoryLink {
    peer: SocketAddr,
    clock: VirtualClock,
    responder: Responder,
    inbox: VecDeque<Vec<u8>>,
    pub sent: Vec<(Timestamp, Vec<u8>)>,
}

impl MemoryLink {
    pub fn new(
        clock: VirtualClock,
        responder: impl FnMut(&[u8]) -> Vec<Vec<u8>> + Send + 'static,
    ) -> Self {
        MemoryLink {
            peer: SocketAddr::from(([10, 0, 0, 1], 5683)),
            clock,
            responder: Box::new(responder),
            inbox: VecDeque::new(),
            sent: Vec::new(),
        }
    }

    /// A peer that never answers.
    pub fn silent(clock: VirtualClock) -> Self {
        MemoryLink::new(clock, |_| Vec::new())
    }
}

impl DatagramLink for MemoryLink {
    fn peer(&self) -> SocketAddr {
        self.peer
    }

    fn send(&mut self, bytes: &[u8]) -> Result<(), CoapError> {
        self.sent.push((self.clock.now(), bytes.to_vec()));
        let replies = (self.responder)(bytes);
        self.inbox.extend(replies);
        Ok(())
    }

    fn recv_until(&mut self, deadline: Timestamp) -> Result<Option<Vec<u8>>, CoapError> {
        if let Some(b) = self.inbox.pop_front() {
            return Ok(Some(b));
        }
        self.clock.advance_to(deadline);
        Ok(None)
    }
}

/// Connected UDP socket on the system clock.
pub struct UdpLink {
    socket: UdpSocket,
    peer: SocketAddr,
    clock: crate::clock::SystemClock,
}

impl UdpLink {
    pub fn connect(peer: SocketAddr) -> std::io::Result<Self> {
        let bind: SocketAddr = if peer.is_ipv4() {
            "0.0.0.0:0".parse().unwrap()
        } else {
            "[::]:0".parse().unwrap()
        };
        let socket = UdpSocket::bind(bind)?;
        socket.connect(peer)?;
        Ok(UdpLink {
            socket,
            peer,
            clock: crate::clock::SystemClock,
        })
    }
}

impl DatagramLink for UdpLink {
    fn peer(&self) -> SocketAddr {
        self.peer
    }

    fn send(&mut self, bytes: &[u8]) -> Result<(), CoapError> {
        self.socket
            .send(bytes)
            .map(|_| ())
            .map_err(|e| CoapError::Transport(e.to_string()))
    }

    fn recv_until(&mut self, deadline: Timestamp) -> Result<Option<Vec<u8>>, CoapError> {
        let wait = deadline.saturating_sub(self.clock.now());
        if wait.is_zero() {
            return Ok(None);
        }
        self.socket
            .set_read_timeout(Some(wait))
            .map_err(|e| CoapError::Transport(e.to_string()))?;
        let mut buf = vec![0u8; 65_536];
        match self.socket.recv(&mut buf) {
            Ok(n) => {
                buf.truncate(n);
                Ok(Some(buf))
            }
            Err(e)
                if matches!(
                    e.kind(),
                    std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                ) =>
            {
                Ok(None)
            }
            Err(e) => Err(CoapError::Transport(e.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::DEFAULT_EPOCH;

    fn peer(n: u8) -> SocketAddr {
        SocketAddr::from(([10, 0, 0, n], 5683))
    }

    fn echo_content(bytes: &[u8]) -> Vec<Vec<u8>> {
        let req = decode(bytes).unwrap();
        let resp = CoapMessage::response_to(&req, Code::CONTENT).with_payload(b"22.5".to_vec());
        vec![encode(&resp).unwrap()]
    }

    #[test]
    fn backoff_schedule() {
        let p = RetransmitParams::default();
        let waits: Vec<u128> = (0..5).map(|n| p.timeout_for(n).as_millis()).collect();
        assert_eq!(waits, vec![2000, 3000, 4500, 6750, 10125]);
        assert_eq!(p.total_wait(), Duration::from_millis(26_375));
    }

    #[test]
    fn con_get_to_live_responder() {
        let clock = VirtualClock::new(DEFAULT_EPOCH);
        let mut link = MemoryLink::new(clock.clone(), echo_content);
        let msg = CoapMessage::request(MessageType::Con, Code::GET, "/3303/0/5700");
        let resp = request(&mut link, &clock, RetransmitParams::default(), msg)
            .unwrap()
            .unwrap();
        assert_eq!(resp.code, Code::CONTENT);
        assert_eq!(resp.payload, b"22.5");
        assert_eq!(clock.now(), DEFAULT_EPOCH);
    }

    #[test]
    fn con_get_to_silent_peer_times_out_on_virtual_clock() {
        let clock = VirtualClock::new(DEFAULT_EPOCH);
        let mut link = MemoryLink::silent(clock.clone());
        let msg = CoapMessage::request(MessageType::Con, Code::GET, "/3303/0/5700");
        let err = request(&mut link, &clock, RetransmitParams::default(), msg).unwrap_err();
        assert_eq!(err, CoapError::Timeout { retransmissions: 4 });
        // 1 initial + 4 retransmissions at 0, 2, 5, 9.5, 16.25 s; give up at 26.375 s
        let times: Vec<i64> = link.sent.iter().map(|(t, _)| t.0 - DEFAULT_EPOCH.0).collect();
        assert_eq!(times, vec![0, 2000, 5000, 9500, 16250]);
        assert_eq!(clock.now().0 - DEFAULT_EPOCH.0, 26_375);
    }

    #[test]
    fn non_request_returns_available_response_or_none() {
        let clock = VirtualClock::new(DEFAULT_EPOCH);
        let msg = CoapMessage::request(MessageType::Non, Code::GET, "/3/0");
        let mut live = MemoryLink::new(clock.clone(), echo_content);
        let r = request(&mut live, &clock, RetransmitParams::default(), msg.clone()).unwrap();
        assert_eq!(r.unwrap().code, Code::CONTENT);
        let mut silent = MemoryLink::silent(clock.clone());
        assert_eq!(
            request(&mut silent, &clock, RetransmitParams::default(), msg).unwrap(),
            None
        );
        assert_eq!(silent.sent.len(), 1);
    }

    #[test]
    fn duplicate_con_is_suppressed_and_ack_resent() {
        let mut server = Messenger::new(RetransmitParams::default(), 1);
        let mut req = CoapMessage::request(MessageType::Con, Code::GET, "/3/0/13");
        req.message_id = 0x0042;
        req.token = vec![9];
        let bytes = encode(&req).unwrap();
        let now = DEFAULT_EPOCH;

        server.handle_datagram(peer(2), &bytes, now);
        let ev = server.poll_event().unwrap();
        let ExchangeEvent::Request { msg, .. } = ev else {
            panic!("expected request")
        };
        server
            .respond(peer(2), &msg, CoapMessage::new(MessageType::Ack, Code::CONTENT, 0))
            .unwrap();
        let (_, first_ack) = server.poll_transmit().unwrap();

        server.handle_datagram(peer(2), &bytes, now + Duration::from_secs(3));
        assert!(server.poll_event().is_none(), "second upcall suppressed");
        let (_, again) = server.poll_transmit().unwrap();
        assert_eq!(again, first_ack);

        // same mid from another source is a different exchange
        server.handle_datagram(peer(3), &bytes, now);
        assert!(matches!(server.poll_event(), Some(ExchangeEvent::Request { .. })));

        // after the exchange lifetime the id may be reused
        server.handle_datagram(peer(2), &bytes, now + EXCHANGE_LIFETIME + Duration::from_secs(1));
        assert!(matches!(server.poll_event(), Some(ExchangeEvent::Request { .. })));
    }

    #[test]
    fn ack_matching_and_separate_response() {
        let mut client = Messenger::new(RetransmitParams::default(), 100);
        let now = DEFAULT_EPOCH;
        let token = client
            .send_request(peer(1), CoapMessage::request(MessageType::Con, Code::GET, "/x"), now)
            .unwrap();
        let (_, sent) = client.poll_transmit().unwrap();
        let req = decode(&sent).unwrap();

        // empty ACK stops retransmission without completing the exchange
        client.handle_datagram(peer(1), &encode(&CoapMessage::empty_ack(req.message_id)).unwrap(), now);
        assert!(client.poll_event().is_none());
        assert_eq!(client.poll_timeout(), None);

        // separate CON response gets acked and surfaces by token
        let sep = CoapMessage::new(MessageType::Con, Code::CONTENT, 777).with_token(&token);
        client.handle_datagram(peer(1), &encode(&sep).unwrap(), now);
        let (_, ack) = client.poll_transmit().unwrap();
        assert_eq!(decode(&ack).unwrap(), CoapMessage::empty_ack(777));
        assert!(matches!(client.poll_event(), Some(ExchangeEvent::Response { token: t, .. }) if t == token));
    }

    #[test]
    fn reset_cancels_pending() {
        let mut client = Messenger::new(RetransmitParams::default(), 5);
        let now = DEFAULT_EPOCH;
        client
            .send_request(peer(1), CoapMessage::request(MessageType::Con, Code::GET, "/x"), now)
            .unwrap();
        let (_, sent) = client.poll_transmit().unwrap();
        let mid = decode(&sent).unwrap().message_id;
        client.handle_datagram(peer(1), &encode(&CoapMessage::reset(mid)).unwrap(), now);
        assert!(matches!(client.poll_event(), Some(ExchangeEvent::Reset { .. })));
        assert!(!client.has_pending());
    }
}
