//! The pseudonymized measurement record and its compact binary form, shared
//! by the broker payloads and the segment files.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::lwm2m::LwPath;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorReading {
    pub pseudonym: String,
    pub endpoint: String,
    pub object_id: u16,
    pub instance: u16,
    pub resource: u16,
    pub value: f64,
    pub unit: String,
    pub device_time: Timestamp,
    pub server_time: Timestamp,
    pub site: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("corrupt reading record: {0}")]
pub struct DecodeError(pub &'static str);

const FORMAT: u8 = 1;

impl SensorReading {
    pub fn path(&self) -> LwPath {
        LwPath::resource(self.object_id, self.instance, self.resource)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            40 + self.site.len() + self.pseudonym.len() + self.endpoint.len() + self.unit.len(),
        );
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(FORMAT);
        for s in [&self.site, &self.pseudonym, &self.endpoint, &self.unit] {
            let b = s.as_bytes();
            let len = u16::try_from(b.len()).unwrap_or(u16::MAX);
            out.extend_from_slice(&len.to_be_bytes());
            out.extend_from_slice(&b[..len as usize]);
        }
        out.extend_from_slice(&self.object_id.to_be_bytes());
        out.extend_from_slice(&self.instance.to_be_bytes());
        out.extend_from_slice(&self.resource.to_be_bytes());
        out.extend_from_slice(&self.value.to_be_bytes());
        out.extend_from_slice(&self.device_time.0.to_be_bytes());
        out.extend_from_slice(&self.server_time.0.to_be_bytes());
    }

    pub fn decode(bytes: &[u8]) -> Result<SensorReading, DecodeError> {
        let mut r = Reader(bytes);
        if r.take(1)?[0] != FORMAT {
            return Err(DecodeError("unknown format"));
        }
        let site = r.string()?;
        let pseudonym = r.string()?;
        let endpoint = r.string()?;
        let unit = r.string()?;
        let reading = SensorReading {
            object_id: r.u16()?,
            instance: r.u16()?,
            resource: r.u16()?,
            value: f64::from_be_bytes(r.array()?),
            device_time: Timestamp(i64::from_be_bytes(r.array()?)),
            server_time: Timestamp(i64::from_be_bytes(r.array()?)),
            site,
            pseudonym,
            endpoint,
            unit,
        };
        if !r.0.is_empty() {
            return Err(DecodeError("trailing bytes"));
        }
        Ok(reading)
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.0.len() < n {
            return Err(DecodeError("truncated"));
        }
        let (h, t) = self.0.split_at(n);
        self.0 = t;
        Ok(h)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_be_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String, DecodeError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| DecodeError("bad utf-8"))
    }
}
