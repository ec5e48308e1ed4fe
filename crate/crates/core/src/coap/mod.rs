//! CoAP message model and wire codec.
//!
//! Only the subset needed by LWM2M registration, observation and chunked
//! firmware fetch is implemented: Observe (6), Uri-Path (11),
//! Content-Format (12) and Uri-Query (15).

pub mod exchange;

use std::fmt;

use thiserror::Error;

pub use exchange::{
    request, DatagramLink, ExchangeEvent, MemoryLink, Messenger, RetransmitParams, UdpLink,
    EXCHANGE_LIFETIME,
};

pub const VERSION: u8 = 1;
pub const MAX_TOKEN_LEN: usize = 8;
/// Upper bound on option values and payloads.
pub const MAX_FIELD_LEN: usize = 64 * 1024;

const PAYLOAD_MARKER: u8 = 0xFF;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CoapError {
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    #[error("malformed PDU: {0}")]
    MalformedPdu(&'static str),
    #[error("request timed out after {retransmissions} retransmissions")]
    Timeout { retransmissions: u32 },
    #[error("transport error: {0}")]
    Transport(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MessageType {
    Con = 0,
    Non = 1,
    Ack = 2,
    Rst = 3,
}

impl MessageType {
    fn from_bits(b: u8) -> MessageType {
        match b & 0x3 {
            0 => MessageType::Con,
            1 => MessageType::Non,
            2 => MessageType::Ack,
            _ => MessageType::Rst,
        }
    }
}

/// Method or response code, stored in its `c.dd` wire form.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Code(pub u8);

impl Code {
    pub const EMPTY: Code = Code(0x00);
    pub const GET: Code = Code(0x01);
    pub const POST: Code = Code(0x02);
    pub const PUT: Code = Code(0x03);
    pub const DELETE: Code = Code(0x04);
    pub const CREATED: Code = Code(0x41);
    pub const DELETED: Code = Code(0x42);
    pub const CHANGED: Code = Code(0x44);
    pub const CONTENT: Code = Code(0x45);
    pub const BAD_REQUEST: Code = Code(0x80);
    pub const UNAUTHORIZED: Code = Code(0x81);
    pub const FORBIDDEN: Code = Code(0x83);
    pub const NOT_FOUND: Code = Code(0x84);
    pub const METHOD_NOT_ALLOWED: Code = Code(0x85);
    pub const INTERNAL_SERVER_ERROR: Code = Code(0xA0);

    pub fn new(class: u8, detail: u8) -> Code {
        Code((class & 0x7) << 5 | (detail & 0x1F))
    }

    pub fn class(self) -> u8 {
        self.0 >> 5
    }

    pub fn detail(self) -> u8 {
        self.0 & 0x1F
    }

    pub fn is_request(self) -> bool {
        self.class() == 0 && self.0 != 0
    }

    pub fn is_success(self) -> bool {
        self.class() == 2
    }
}

impl fmt::Debug for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.class(), self.detail())
    }
}

impl fmt::Display for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OptionNumber {
    Observe = 6,
    UriPath = 11,
    ContentFormat = 12,
    UriQuery = 15,
}

impl OptionNumber {
    pub fn from_u16(n: u16) -> Option<OptionNumber> {
        match n {
            6 => Some(OptionNumber::Observe),
            11 => Some(OptionNumber::UriPath),
            12 => Some(OptionNumber::ContentFormat),
            15 => Some(OptionNumber::UriQuery),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoapOption {
    pub number: OptionNumber,
    pub value: Vec<u8>,
}

pub mod content_format {
    pub const TEXT_PLAIN: u16 = 0;
    pub const LINK_FORMAT: u16 = 40;
    pub const OCTET_STREAM: u16 = 42;
    pub const JSON: u16 = 50;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoapMessage {
    pub mtype: MessageType,
    pub code: Code,
    pub message_id: u16,
    pub token: Vec<u8>,
    /// Kept sorted by option number; equal numbers keep insertion order.
    pub options: Vec<CoapOption>,
    pub payload: Vec<u8>,
}

impl CoapMessage {
    pub fn new(mtype: MessageType, code: Code, message_id: u16) -> Self {
        CoapMessage {
            mtype,
            code,
            message_id,
            token: Vec::new(),
            options: Vec::new(),
            payload: Vec::new(),
        }
    }

    pub fn request(mtype: MessageType, code: Code, path: &str) -> Self {
        let mut m = CoapMessage::new(mtype, code, 0);
        m.set_path(path);
        m
    }

    /// Empty ACK for `mid`.
    pub fn empty_ack(message_id: u16) -> Self {
        CoapMessage::new(MessageType::Ack, Code::EMPTY, message_id)
    }

    pub fn reset(message_id: u16) -> Self {
        CoapMessage::new(MessageType::Rst, Code::EMPTY, message_id)
    }

    pub fn with_token(mut self, token: &[u8]) -> Self {
        self.token = token.to_vec();
        self
    }

    pub fn with_payload(mut self, payload: impl Into<Vec<u8>>) -> Self {
        self.payload = payload.into();
        self
    }

    /// Inserts an option after any existing options with the same number.
    pub fn add_option(&mut self, number: OptionNumber, value: Vec<u8>) {
        let pos = self.options.partition_point(|o| o.number <= number);
        self.options.insert(pos, CoapOption { number, value });
    }

    pub fn remove_options(&mut self, number: OptionNumber) {
        self.options.retain(|o| o.number != number);
    }

    pub fn option_values(&self, number: OptionNumber) -> impl Iterator<Item = &[u8]> {
        self.options
            .iter()
            .filter(move |o| o.number == number)
            .map(|o| o.value.as_slice())
    }

    pub fn set_path(&mut self, path: &str) {
        self.remove_options(OptionNumber::UriPath);
        for seg in path.split('/').filter(|s| !s.is_empty()) {
            self.add_option(OptionNumber::UriPath, seg.as_bytes().to_vec());
        }
    }

    /// Uri-Path joined with a leading slash, e.g. `/3303/0/5700`.
    pub fn path(&self) -> String {
        let mut out = String::new();
        for seg in self.option_values(OptionNumber::UriPath) {
            out.push('/');
            out.push_str(&String::from_utf8_lossy(seg));
        }
        if out.is_empty() {
            out.push('/');
        }
        out
    }

    pub fn add_query(&mut self, key: &str, value: impl fmt::Display) {
        self.add_option(OptionNumber::UriQuery, format!("{key}={value}").into_bytes());
    }

    pub fn query(&self, key: &str) -> Option<String> {
        self.option_values(OptionNumber::UriQuery).find_map(|v| {
            let s = std::str::from_utf8(v).ok()?;
            let (k, val) = s.split_once('=')?;
            (k == key).then(|| val.to_string())
        })
    }

    pub fn set_observe(&mut self, seq: u32) {
        self.remove_options(OptionNumber::Observe);
        self.add_option(OptionNumber::Observe, encode_uint(seq));
    }

    pub fn observe(&self) -> Option<u32> {
        self.option_values(OptionNumber::Observe)
            .next()
            .map(decode_uint)
    }

    pub fn set_content_format(&mut self, cf: u16) {
        self.remove_options(OptionNumber::ContentFormat);
        self.add_option(OptionNumber::ContentFormat, encode_uint(cf as u32));
    }

    pub fn content_format(&self) -> Option<u16> {
        self.option_values(OptionNumber::ContentFormat)
            .next()
            .map(|v| decode_uint(v) as u16)
    }

    /// Builds a piggybacked (ACK) or separate response to `req`.
    pub fn response_to(req: &CoapMessage, code: Code) -> CoapMessage {
        let (mtype, mid) = match req.mtype {
            MessageType::Con => (MessageType::Ack, req.message_id),
            _ => (MessageType::Non, 0),
        };
        CoapMessage::new(mtype, code, mid).with_token(&req.token)
    }

    pub fn encode(&self) -> Result<Vec<u8>, CoapError> {
        encode(self)
    }

    pub fn decode(bytes: &[u8]) -> Result<CoapMessage, CoapError> {
        decode(bytes)
    }
}

/// Minimal big-endian unsigned encoding (zero encodes as no bytes).
pub fn encode_uint(v: u32) -> Vec<u8> {
    let bytes = v.to_be_bytes();
    let skip = bytes.iter().take_while(|b| **b == 0).count();
    bytes[skip..].to_vec()
}

pub fn decode_uint(v: &[u8]) -> u32 {
    v.iter()
        .rev()
        .take(4)
        .rev()
        .fold(0u32, |acc, b| (acc << 8) | *b as u32)
}

fn nibble_and_ext(v: usize, ext: &mut Vec<u8>) -> u8 {
    if v < 13 {
        v as u8
    } else if v < 269 {
        ext.push((v - 13) as u8);
        13
    } else {
        ext.extend_from_slice(&((v - 269) as u16).to_be_bytes());
        14
    }
}

pub fn encode(msg: &CoapMessage) -> Result<Vec<u8>, CoapError> {
    if msg.token.len() > MAX_TOKEN_LEN {
        return Err(CoapError::InvalidMessage(format!(
            "token length {} exceeds {}",
            msg.token.len(),
            MAX_TOKEN_LEN
        )));
    }
    if msg.payload.len() > MAX_FIELD_LEN {
        return Err(CoapError::InvalidMessage("payload exceeds 64 KiB".into()));
    }
    let mut out = Vec::with_capacity(4 + msg.token.len() + msg.payload.len() + 16);
    out.push(VERSION << 6 | (msg.mtype as u8) << 4 | msg.token.len() as u8);
    out.push(msg.code.0);
    out.extend_from_slice(&msg.message_id.to_be_bytes());
    out.extend_from_slice(&msg.token);

    let mut prev = 0usize;
    for opt in &msg.options {
        let number = opt.number as usize;
        if number < prev {
            return Err(CoapError::InvalidMessage(
                "options not sorted by number".into(),
            ));
        }
        if opt.value.len() > 65535 {
            return Err(CoapError::InvalidMessage(format!(
                "option {} value exceeds 65535 bytes",
                number
            )));
        }
        let mut ext = Vec::new();
        let d = nibble_and_ext(number - prev, &mut ext);
        let l = nibble_and_ext(opt.value.len(), &mut ext);
        out.push(d << 4 | l);
        out.extend_from_slice(&ext);
        out.extend_from_slice(&opt.value);
        prev = number;
    }
    if !msg.payload.is_empty() {
        out.push(PAYLOAD_MARKER);
        out.extend_from_slice(&msg.payload);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CoapError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or(CoapError::MalformedPdu(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn ext(&mut self, nibble: u8) -> Result<usize, CoapError> {
        Ok(match nibble {
            0..=12 => nibble as usize,
            13 => self.take(1, "option overrun")?[0] as usize + 13,
            14 => {
                let b = self.take(2, "option overrun")?;
                u16::from_be_bytes([b[0], b[1]]) as usize + 269
            }
            _ => return Err(CoapError::MalformedPdu("reserved option nibble")),
        })
    }
}

/// Decodes a datagram. Total: every input yields a message or `MalformedPdu`.
pub fn decode(bytes: &[u8]) -> Result<CoapMessage, CoapError> {
    if bytes.len() < 4 {
        return Err(CoapError::MalformedPdu("short header"));
    }
    let ver = bytes[0] >> 6;
    if ver != VERSION {
        return Err(CoapError::MalformedPdu("bad version"));
    }
    let tkl = (bytes[0] & 0x0F) as usize;
    if tkl > MAX_TOKEN_LEN {
        return Err(CoapError::MalformedPdu("bad TKL"));
    }
    let mut msg = CoapMessage::new(
        MessageType::from_bits(bytes[0] >> 4),
        Code(bytes[1]),
        u16::from_be_bytes([bytes[2], bytes[3]]),
    );
    let mut r = Reader { buf: bytes, pos: 4 };
    msg.token = r.take(tkl, "token overrun")?.to_vec();

    let mut number = 0usize;
    while r.pos < bytes.len() {
        let head = bytes[r.pos];
        r.pos += 1;
        if head == PAYLOAD_MARKER {
            if r.pos == bytes.len() {
                return Err(CoapError::MalformedPdu("payload marker without payload"));
            }
            let rest = &bytes[r.pos..];
            if rest.len() > MAX_FIELD_LEN {
                return Err(CoapError::MalformedPdu("payload too large"));
            }
            msg.payload = rest.to_vec();
            break;
        }
        let delta = r.ext(head >> 4)?;
        let len = r.ext(head & 0x0F)?;
        number += delta;
        let num = u16::try_from(number)
            .ok()
            .and_then(OptionNumber::from_u16)
            .ok_or(CoapError::MalformedPdu("unsupported option"))?;
        let value = r.take(len, "option overrun")?.to_vec();
        msg.options.push(CoapOption { number: num, value });
    }
    Ok(msg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn con_get_header_only() {
        let m = CoapMessage::new(MessageType::Con, Code::GET, 0x1234);
        assert_eq!(encode(&m).unwrap(), vec![0x40, 0x01, 0x12, 0x34]);
        assert_eq!(decode(&[0x40, 0x01, 0x12, 0x34]).unwrap(), m);
    }

    #[test]
    fn ack_content_with_token_and_payload() {
        let m = CoapMessage::new(MessageType::Ack, Code::CONTENT, 0x0001)
            .with_token(&[0xAB])
            .with_payload(b"x".to_vec());
        assert_eq!(
            encode(&m).unwrap(),
            vec![0x61, 0x45, 0x00, 0x01, 0xAB, 0xFF, 0x78]
        );
    }

    #[test]
    fn option_delta_encoding() {
        // Observe=0 (empty value) then Uri-Path "rd": delta 6 len 0, delta 5 len 2.
        let mut m = CoapMessage::new(MessageType::Con, Code::GET, 7);
        m.set_path("rd");
        m.set_observe(0);
        let bytes = encode(&m).unwrap();
        assert_eq!(bytes, vec![0x40, 0x01, 0x00, 0x07, 0x60, 0x52, b'r', b'd']);
        assert_eq!(decode(&bytes).unwrap(), m);
    }

    #[test]
    fn long_option_uses_extended_length() {
        let mut m = CoapMessage::new(MessageType::Non, Code::PUT, 1);
        m.add_option(OptionNumber::UriQuery, vec![b'a'; 300]);
        let bytes = encode(&m).unwrap();
        // delta 15 -> 13 + ext 2; len 300 -> 14 + ext (300-269)=31
        assert_eq!(bytes[4], 0xDE);
        assert_eq!(&bytes[5..8], &[2, 0, 31]);
        assert_eq!(decode(&bytes).unwrap(), m);
    }

    #[test]
    fn encode_rejects_long_token() {
        let m = CoapMessage::new(MessageType::Con, Code::GET, 1).with_token(&[0; 9]);
        assert!(matches!(encode(&m), Err(CoapError::InvalidMessage(_))));
    }

    #[test]
    fn encode_rejects_unsorted_options() {
        let mut m = CoapMessage::new(MessageType::Con, Code::GET, 1);
        m.options.push(CoapOption {
            number: OptionNumber::UriQuery,
            value: vec![],
        });
        m.options.push(CoapOption {
            number: OptionNumber::UriPath,
            value: vec![],
        });
        assert!(encode(&m).is_err());
    }

    #[test]
    fn decode_errors() {
        assert!(matches!(decode(&[]), Err(CoapError::MalformedPdu(_))));
        assert!(matches!(decode(&[0x40, 1, 0]), Err(CoapError::MalformedPdu(_))));
        // TKL 9
        assert!(decode(&[0x49, 1, 0, 0]).is_err());
        // token shorter than TKL
        assert!(decode(&[0x42, 1, 0, 0, 1]).is_err());
        // option value overrun
        assert!(decode(&[0x40, 1, 0, 0, 0xB5, b'a']).is_err());
        // unsupported option number 1 (If-Match)
        assert!(decode(&[0x40, 1, 0, 0, 0x10]).is_err());
        // version 2
        assert!(decode(&[0x80, 1, 0, 0]).is_err());
        // marker with nothing after it
        assert!(decode(&[0x40, 1, 0, 0, 0xFF]).is_err());
    }

    #[test]
    fn path_and_query_helpers() {
        let mut m = CoapMessage::request(MessageType::Con, Code::POST, "/rd");
        m.add_query("ep", "egg-017");
        m.add_query("lt", 300);
        assert_eq!(m.path(), "/rd");
        assert_eq!(m.query("ep").as_deref(), Some("egg-017"));
        assert_eq!(m.query("lt").as_deref(), Some("300"));
        assert_eq!(m.query("b"), None);
    }

    #[test]
    fn uint_options() {
        assert!(encode_uint(0).is_empty());
        assert_eq!(encode_uint(0x0102), vec![1, 2]);
        assert_eq!(decode_uint(&[1, 2]), 0x0102);
    }

    fn arb_message() -> impl Strategy<Value = CoapMessage> {
        let opt = (
            prop_oneof![
                Just(OptionNumber::Observe),
                Just(OptionNumber::UriPath),
                Just(OptionNumber::ContentFormat),
                Just(OptionNumber::UriQuery)
            ],
            proptest::collection::vec(any::<u8>(), 0..300),
        );
        (
            0u8..4,
            any::<u8>(),
            any::<u16>(),
            proptest::collection::vec(any::<u8>(), 0..=8),
            proptest::collection::vec(opt, 0..6),
            proptest::collection::vec(any::<u8>(), 0..64),
        )
            .prop_map(|(t, code, mid, token, opts, payload)| {
                let mut m = CoapMessage::new(MessageType::from_bits(t), Code(code), mid)
                    .with_token(&token)
                    .with_payload(payload);
                for (n, v) in opts {
                    m.add_option(n, v);
                }
                m
            })
    }

    proptest! {
        #[test]
        fn round_trip(m in arb_message()) {
            let bytes = encode(&m).unwrap();
            prop_assert_eq!(decode(&bytes).unwrap(), m);
        }

        #[test]
        fn decode_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..128)) {
            if let Ok(m) = decode(&bytes) {
                // anything accepted re-encodes to the same bytes
                prop_assert_eq!(encode(&m).unwrap(), bytes);
            }
        }
    }
}
