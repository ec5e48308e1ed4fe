//! Pre-shared-key secured datagram sessions.
//!
//! A one round trip handshake authenticates both peers with a shared 16 byte
//! key, after which application data travels in AES-128-GCM records with a
//! 64 entry anti-replay window.
//!
//! Datagrams on the wire start with a content-type byte:
//!
//! ```text
//! 22 ‖ handshake message
//! 21 ‖ alert code
//! 23 ‖ record = session_id (8) ‖ seq (6, big-endian) ‖ ciphertext ‖ tag (16)
//! ```
//!
//! ClientHello = `01 ‖ client_random (32) ‖ id_len (1) ‖ psk_id ‖ binder (32)`
//! where the binder is HMAC-SHA256 keyed by the PSK over everything before it.
//! ServerHello = `02 ‖ server_random (32) ‖ session_id (8) ‖ mac (32)` where the
//! mac is HMAC-SHA256 keyed by the PSK over the ClientHello and the preceding
//! ServerHello fields.

use std::collections::HashMap;
use std::fmt;
use std::time::Duration;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes128Gcm, Nonce};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use sha2::Sha256;
use thiserror::Error;

use crate::clock::Timestamp;

type HmacSha256 = Hmac<Sha256>;

pub const CT_ALERT: u8 = 21;
pub const CT_HANDSHAKE: u8 = 22;
pub const CT_RECORD: u8 = 23;

const HS_CLIENT_HELLO: u8 = 1;
const HS_SERVER_HELLO: u8 = 2;

pub const ALERT_UNKNOWN_PSK: u8 = 1;
pub const ALERT_AUTH_FAILURE: u8 = 2;

pub const KEY_LEN: usize = 16;
pub const RANDOM_LEN: usize = 32;
pub const SESSION_ID_LEN: usize = 8;
pub const HEADER_LEN: usize = SESSION_ID_LEN + 6;
pub const TAG_LEN: usize = 16;
pub const REPLAY_WINDOW: u64 = 64;
pub const MAX_SEQ: u64 = 1 << 48;
pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PskError {
    #[error("unknown PSK identity {0:?}")]
    UnknownPskId(String),
    #[error("handshake authentication failed")]
    AuthFailure,
    #[error("handshake timed out")]
    HandshakeTimeout,
    #[error("send sequence exhausted")]
    SequenceExhausted,
    #[error("record failed integrity check")]
    IntegrityError,
    #[error("record {0} replayed or outside the window")]
    ReplayError(u64),
    #[error("unknown session")]
    UnknownSession,
    #[error("malformed datagram: {0}")]
    Malformed(&'static str),
    #[error("invalid identity: {0}")]
    InvalidIdentity(String),
}

#[derive(Clone, PartialEq, Eq)]
pub struct PskIdentity {
    pub psk_id: String,
    pub psk_key: [u8; KEY_LEN],
}

impl fmt::Debug for PskIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PskIdentity")
            .field("psk_id", &self.psk_id)
            .finish_non_exhaustive()
    }
}

impl PskIdentity {
    pub fn new(psk_id: impl Into<String>, key: &[u8]) -> Result<Self, PskError> {
        let psk_id = psk_id.into();
        if psk_id.is_empty()
            || psk_id.len() > 64
            || !psk_id.chars().all(|c| c.is_ascii_graphic())
        {
            return Err(PskError::InvalidIdentity(format!(
                "psk_id must be 1-64 printable characters, got {psk_id:?}"
            )));
        }
        let psk_key: [u8; KEY_LEN] = key.try_into().map_err(|_| {
            PskError::InvalidIdentity(format!("psk_key must be 16 bytes, got {}", key.len()))
        })?;
        Ok(PskIdentity { psk_id, psk_key })
    }

    pub fn from_hex(psk_id: impl Into<String>, hex_key: &str) -> Result<Self, PskError> {
        let key = hex::decode(hex_key.trim())
            .map_err(|e| PskError::InvalidIdentity(format!("bad key hex: {e}")))?;
        PskIdentity::new(psk_id, &key)
    }
}

/// Server side psk_id → key table.
#[derive(Clone, Debug, Default)]
pub struct KeyTable {
    keys: HashMap<String, [u8; KEY_LEN]>,
}

impl KeyTable {
    pub fn new() -> Self {
        KeyTable::default()
    }

    pub fn insert(&mut self, identity: &PskIdentity) {
        self.keys.insert(identity.psk_id.clone(), identity.psk_key);
    }

    pub fn get(&self, psk_id: &str) -> Option<&[u8; KEY_LEN]> {
        self.keys.get(psk_id)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Parses `psk_id hexkey` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, PskError> {
        let mut t = KeyTable::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (id, key) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| PskError::InvalidIdentity(format!("bad key line {line:?}")))?;
            t.insert(&PskIdentity::from_hex(id, key)?);
        }
        Ok(t)
    }

    pub fn to_text(&self) -> String {
        let mut ids: Vec<_> = self.keys.iter().collect();
        ids.sort();
        ids.into_iter()
            .map(|(id, k)| format!("{id} {}\n", hex::encode(k)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Client,
    Server,
}

struct DirectionKeys {
    key: [u8; KEY_LEN],
    iv: [u8; 12],
    cipher: Aes128Gcm,
}

impl DirectionKeys {
    fn new(okm: &[u8; 28]) -> Self {
        let mut key = [0u8; KEY_LEN];
        let mut iv = [0u8; 12];
        key.copy_from_slice(&okm[..16]);
        iv.copy_from_slice(&okm[16..]);
        DirectionKeys {
            key,
            iv,
            cipher: Aes128Gcm::new(&key.into()),
        }
    }

    fn nonce(&self, seq: u64) -> [u8; 12] {
        let mut n = self.iv;
        for (i, b) in seq.to_be_bytes().iter().enumerate() {
            n[4 + i] ^= b;
        }
        n
    }
}

/// Sliding anti-replay bitmap over the highest accepted sequence number.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReplayWindow {
    max: Option<u64>,
    bitmap: u64,
}

impl ReplayWindow {
    pub fn check(&self, seq: u64) -> bool {
        match self.max {
            None => true,
            Some(max) if seq > max => true,
            Some(max) => {
                let diff = max - seq;
                diff < REPLAY_WINDOW && self.bitmap & (1 << diff) == 0
            }
        }
    }

    pub fn accept(&mut self, seq: u64) {
        match self.max {
            None => {
                self.max = Some(seq);
                self.bitmap = 1;
            }
            Some(max) if seq > max => {
                let shift = seq - max;
                self.bitmap = if shift >= REPLAY_WINDOW {
                    0
                } else {
                    self.bitmap << shift
                };
                self.bitmap |= 1;
                self.max = Some(seq);
            }
            Some(max) => self.bitmap |= 1 << (max - seq),
        }
    }
}

pub struct SecureSession {
    session_id: [u8; SESSION_ID_LEN],
    role: Role,
    send: DirectionKeys,
    recv: DirectionKeys,
    send_seq: u64,
    window: ReplayWindow,
}

impl fmt::Debug for SecureSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecureSession")
            .field("session_id", &hex::encode(self.session_id))
            .field("role", &self.role)
            .field("send_seq", &self.send_seq)
            .finish_non_exhaustive()
    }
}

fn derive_keys(
    psk_key: &[u8; KEY_LEN],
    client_random: &[u8; RANDOM_LEN],
    server_random: &[u8; RANDOM_LEN],
) -> ([u8; 28], [u8; 28]) {
    let mut salt = [0u8; 2 * RANDOM_LEN];
    salt[..RANDOM_LEN].copy_from_slice(client_random);
    salt[RANDOM_LEN..].copy_from_slice(server_random);
    let hk = Hkdf::<Sha256>::new(Some(&salt), psk_key);
    let mut c2s = [0u8; 28];
    let mut s2c = [0u8; 28];
    hk.expand(b"psk-transport c2s", &mut c2s)
        .expect("28 bytes is a valid HKDF length");
    hk.expand(b"psk-transport s2c", &mut s2c)
        .expect("28 bytes is a valid HKDF length");
    (c2s, s2c)
}

impl SecureSession {
    fn establish(
        role: Role,
        session_id: [u8; SESSION_ID_LEN],
        psk_key: &[u8; KEY_LEN],
        client_random: &[u8; RANDOM_LEN],
        server_random: &[u8; RANDOM_LEN],
    ) -> Self {
        let (c2s, s2c) = derive_keys(psk_key, client_random, server_random);
        let (send, recv) = match role {
            Role::Client => (DirectionKeys::new(&c2s), DirectionKeys::new(&s2c)),
            Role::Server => (DirectionKeys::new(&s2c), DirectionKeys::new(&c2s)),
        };
        SecureSession {
            session_id,
            role,
            send,
            recv,
            send_seq: 0,
            window: ReplayWindow::default(),
        }
    }

    pub fn session_id(&self) -> [u8; SESSION_ID_LEN] {
        self.session_id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn send_seq(&self) -> u64 {
        self.send_seq
    }

    /// (client→server key, server→client key)
    pub fn directional_keys(&self) -> ([u8; KEY_LEN], [u8; KEY_LEN]) {
        match self.role {
            Role::Client => (self.send.key, self.recv.key),
            Role::Server => (self.recv.key, self.send.key),
        }
    }

    /// Encrypts `plaintext` into a record (without the content-type byte).
    pub fn seal(&mut self, plaintext: &[u8]) -> Result<Vec<u8>, PskError> {
        if self.send_seq >= MAX_SEQ {
            return Err(PskError::SequenceExhausted);
        }
        let seq = self.send_seq;
        let mut record = Vec::with_capacity(HEADER_LEN + plaintext.len() + TAG_LEN);
        record.extend_from_slice(&self.session_id);
        record.extend_from_slice(&seq.to_be_bytes()[2..]);
        let nonce = self.send.nonce(seq);
        let ct = self
            .send
            .cipher
            .encrypt(
                Nonce::from_slice(&nonce),
                Payload {
                    msg: plaintext,
                    aad: &record[..HEADER_LEN],
                },
            )
            .map_err(|_| PskError::IntegrityError)?;
        record.extend_from_slice(&ct);
        self.send_seq += 1;
        Ok(record)
    }

    /// Verifies and decrypts a record (without the content-type byte).
    pub fn open(&mut self, record: &[u8]) -> Result<Vec<u8>, PskError> {
        if record.len() < HEADER_LEN + TAG_LEN {
            return Err(PskError::IntegrityError);
        }
        if record[..SESSION_ID_LEN] != self.session_id {
            return Err(PskError::UnknownSession);
        }
        let seq = record_seq(record).expect("length checked");
        if !self.window.check(seq) {
            return Err(PskError::ReplayError(seq));
        }
        let nonce = self.recv.nonce(seq);
        let pt = self
            .recv
            .cipher
            .decrypt(
                Nonce::from_slice(&nonce),
                Payload {
                    msg: &record[HEADER_LEN..],
                    aad: &record[..HEADER_LEN],
                },
            )
            .map_err(|_| PskError::IntegrityError)?;
        self.window.accept(seq);
        Ok(pt)
    }

    #[cfg(test)]
    pub(crate) fn force_send_seq(&mut self, seq: u64) {
        self.send_seq = seq;
    }
}

pub fn record_session_id(record: &[u8]) -> Option<[u8; SESSION_ID_LEN]> {
    record.get(..SESSION_ID_LEN)?.try_into().ok()
}

pub fn record_seq(record: &[u8]) -> Option<u64> {
    let b = record.get(SESSION_ID_LEN..HEADER_LEN)?;
    let mut full = [0u8; 8];
    full[2..].copy_from_slice(b);
    Some(u64::from_be_bytes(full))
}

fn hmac(key: &[u8], parts: &[&[u8]]) -> [u8; 32] {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(key).expect("HMAC takes any key length");
    for p in parts {
        mac.update(p);
    }
    mac.finalize().into_bytes().into()
}

fn hmac_verify(key: &[u8], parts: &[&[u8]], tag: &[u8]) -> bool {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(key).expect("HMAC takes any key length");
    for p in parts {
        mac.update(p);
    }
    mac.verify_slice(tag).is_ok()
}

/// Classified inbound datagram.
#[derive(Debug, PartialEq, Eq)]
pub enum Datagram<'a> {
    ClientHello(&'a [u8]),
    ServerHello(&'a [u8]),
    Alert(u8),
    Record(&'a [u8]),
}

pub fn classify(bytes: &[u8]) -> Result<Datagram<'_>, PskError> {
    let (&ct, body) = bytes.split_first().ok_or(PskError::Malformed("empty"))?;
    match ct {
        CT_HANDSHAKE => match body.first() {
            Some(&HS_CLIENT_HELLO) => Ok(Datagram::ClientHello(body)),
            Some(&HS_SERVER_HELLO) => Ok(Datagram::ServerHello(body)),
            _ => Err(PskError::Malformed("unknown handshake type")),
        },
        CT_ALERT => body
            .first()
            .map(|c| Datagram::Alert(*c))
            .ok_or(PskError::Malformed("empty alert")),
        CT_RECORD => Ok(Datagram::Record(body)),
        _ => Err(PskError::Malformed("unknown content type")),
    }
}

pub fn frame_record(record: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(record.len() + 1);
    out.push(CT_RECORD);
    out.extend_from_slice(record);
    out
}

pub fn frame_alert(code: u8) -> Vec<u8> {
    vec![CT_ALERT, code]
}

/// Client half of the handshake.
#[derive(Debug)]
pub struct ClientHandshake {
    identity: PskIdentity,
    client_random: [u8; RANDOM_LEN],
    hello: Vec<u8>,
    deadline: Timestamp,
}

impl ClientHandshake {
    /// Returns the state and the framed ClientHello datagram.
    pub fn start(
        identity: PskIdentity,
        client_random: [u8; RANDOM_LEN],
        now: Timestamp,
    ) -> (Self, Vec<u8>) {
        let mut hello = Vec::with_capacity(1 + RANDOM_LEN + 1 + identity.psk_id.len() + 32);
        hello.push(HS_CLIENT_HELLO);
        hello.extend_from_slice(&client_random);
        hello.push(identity.psk_id.len() as u8);
        hello.extend_from_slice(identity.psk_id.as_bytes());
        let binder = hmac(&identity.psk_key, &[b"client hello", &hello]);
        hello.extend_from_slice(&binder);
        let mut framed = vec![CT_HANDSHAKE];
        framed.extend_from_slice(&hello);
        (
            ClientHandshake {
                identity,
                client_random,
                hello,
                deadline: now + HANDSHAKE_TIMEOUT,
            },
            framed,
        )
    }

    pub fn deadline(&self) -> Timestamp {
        self.deadline
    }

    pub fn check_timeout(&self, now: Timestamp) -> Result<(), PskError> {
        if now >= self.deadline {
            Err(PskError::HandshakeTimeout)
        } else {
            Ok(())
        }
    }

    /// Completes the handshake from a ServerHello body or maps an alert.
    pub fn finish(self, datagram: &[u8]) -> Result<SecureSession, PskError> {
        let body = match classify(datagram)? {
            Datagram::ServerHello(b) => b,
            Datagram::Alert(ALERT_UNKNOWN_PSK) => {
                return Err(PskError::UnknownPskId(self.identity.psk_id))
            }
            Datagram::Alert(_) => return Err(PskError::AuthFailure),
            _ => return Err(PskError::Malformed("expected ServerHello")),
        };
        if body.len() != 1 + RANDOM_LEN + SESSION_ID_LEN + 32 {
            return Err(PskError::Malformed("ServerHello length"));
        }
        let fields = &body[..1 + RANDOM_LEN + SESSION_ID_LEN];
        let tag = &body[1 + RANDOM_LEN + SESSION_ID_LEN..];
        if !hmac_verify(
            &self.identity.psk_key,
            &[b"server hello", &self.hello, fields],
            tag,
        ) {
            return Err(PskError::AuthFailure);
        }
        let server_random: [u8; RANDOM_LEN] = body[1..1 + RANDOM_LEN].try_into().unwrap();
        let session_id: [u8; SESSION_ID_LEN] =
            body[1 + RANDOM_LEN..1 + RANDOM_LEN + SESSION_ID_LEN].try_into().unwrap();
        Ok(SecureSession::establish(
            Role::Client,
            session_id,
            &self.identity.psk_key,
            &self.client_random,
            &server_random,
        ))
    }
}

#[derive(Debug)]
pub struct Accepted {
    pub psk_id: String,
    pub server_hello: Vec<u8>,
    pub session: SecureSession,
}

/// Server half: validates a ClientHello body and answers with a framed
/// ServerHello. Failures carry the framed alert to send back.
pub fn server_accept(
    keys: &KeyTable,
    hello: &[u8],
    server_random: [u8; RANDOM_LEN],
    session_id: [u8; SESSION_ID_LEN],
) -> Result<Accepted, (PskError, Option<Vec<u8>>)> {
    let malformed = |w| (PskError::Malformed(w), None);
    if hello.len() < 1 + RANDOM_LEN + 1 + 32 || hello[0] != HS_CLIENT_HELLO {
        return Err(malformed("ClientHello length"));
    }
    let id_len = hello[1 + RANDOM_LEN] as usize;
    let id_end = 2 + RANDOM_LEN + id_len;
    if hello.len() != id_end + 32 {
        return Err(malformed("ClientHello length"));
    }
    let psk_id = std::str::from_utf8(&hello[2 + RANDOM_LEN..id_end])
        .map_err(|_| malformed("psk_id not utf-8"))?
        .to_string();
    let Some(key) = keys.get(&psk_id) else {
        return Err((
            PskError::UnknownPskId(psk_id),
            Some(frame_alert(ALERT_UNKNOWN_PSK)),
        ));
    };
    if !hmac_verify(key, &[b"client hello", &hello[..id_end]], &hello[id_end..]) {
        return Err((PskError::AuthFailure, Some(frame_alert(ALERT_AUTH_FAILURE))));
    }
    let client_random: [u8; RANDOM_LEN] = hello[1..1 + RANDOM_LEN].try_into().unwrap();
    let mut body = Vec::with_capacity(1 + RANDOM_LEN + SESSION_ID_LEN + 32);
    body.push(HS_SERVER_HELLO);
    body.extend_from_slice(&server_random);
    body.extend_from_slice(&session_id);
    let mac = hmac(key, &[b"server hello", hello, &body]);
    body.extend_from_slice(&mac);
    let mut server_hello = vec![CT_HANDSHAKE];
    server_hello.extend_from_slice(&body);
    Ok(Accepted {
        psk_id,
        server_hello,
        session: SecureSession::establish(
            Role::Server,
            session_id,
            key,
            &client_random,
            &server_random,
        ),
    })
}

/// Runs both halves of the handshake in memory. Returns (client, server)
/// sessions.
pub fn handshake(
    client_random: [u8; RANDOM_LEN],
    identity: &PskIdentity,
    server_keys: &KeyTable,
    server_random: [u8; RANDOM_LEN],
    session_id: [u8; SESSION_ID_LEN],
) -> Result<(SecureSession, SecureSession), PskError> {
    let (client, hello) = ClientHandshake::start(identity.clone(), client_random, Timestamp::ZERO);
    let Datagram::ClientHello(body) = classify(&hello)? else {
        unreachable!("start produces a ClientHello")
    };
    match server_accept(server_keys, body, server_random, session_id) {
        Ok(acc) => {
            let c = client.finish(&acc.server_hello)?;
            Ok((c, acc.session))
        }
        Err((e, _)) => Err(e),
    }
}
