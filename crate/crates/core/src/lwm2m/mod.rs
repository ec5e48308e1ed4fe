//! LWM2M object model, registration registry, server and client.

pub mod client;
pub mod model;
pub mod registry;
pub mod server;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{ClientEvent, ClientState, Lwm2mClient};
pub use model::{ObjectModel, Operations, ResourceValue};
pub use registry::{DeregReason, Registration, Registry};
pub use server::{Lwm2mServer, OpId, OpKind, OpOutcome, ServerEvent};

pub const RES_SENSOR_VALUE: u16 = 5700;
pub const RES_UNIT: u16 = 5701;
pub const RES_ON_OFF: u16 = 5850;
pub const RES_COLOUR: u16 = 5706;
pub const RES_MULTI_STATE: u16 = 5547;

pub const OBJ_DEVICE: u16 = 3;
pub const OBJ_FIRMWARE: u16 = 5;
pub const OBJ_ENERGY: u16 = 3305;
pub const OBJ_WRISTBAND: u16 = 27000;

pub const DEVICE_FW_VERSION: u16 = 3;
pub const DEVICE_REBOOT: u16 = 4;
pub const DEVICE_FACTORY_RESET: u16 = 5;
pub const DEVICE_CURRENT_TIME: u16 = 13;

pub const FW_PACKAGE_URI: u16 = 1;
pub const FW_UPDATE: u16 = 2;
pub const FW_STATE: u16 = 3;
pub const FW_RESULT: u16 = 5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Lwm2mError {
    #[error("bad link format: {0}")]
    BadLinkFormat(String),
    #[error("unknown object {0}")]
    UnknownObject(u16),
    #[error("unknown registration {0}")]
    UnknownRegistration(String),
    #[error("endpoint {0} is not registered")]
    NotRegistered(String),
    #[error("path {0} not found")]
    PathNotFound(String),
    #[error("path {0} is not writable")]
    NotWritable(String),
    #[error("path {0} is not executable")]
    NotExecutable(String),
    #[error("bad path {0:?}")]
    BadPath(String),
    #[error("bad payload: {0}")]
    BadPayload(String),
}

/// `/object[/instance[/resource]]`
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LwPath {
    pub object: u16,
    pub instance: Option<u16>,
    pub resource: Option<u16>,
}

impl LwPath {
    pub fn object(object: u16) -> Self {
        LwPath {
            object,
            instance: None,
            resource: None,
        }
    }

    pub fn instance(object: u16, instance: u16) -> Self {
        LwPath {
            object,
            instance: Some(instance),
            resource: None,
        }
    }

    pub fn resource(object: u16, instance: u16, resource: u16) -> Self {
        LwPath {
            object,
            instance: Some(instance),
            resource: Some(resource),
        }
    }

    pub fn with_resource(self, resource: u16) -> Self {
        LwPath {
            resource: Some(resource),
            ..self
        }
    }

    pub fn is_resource(&self) -> bool {
        self.resource.is_some()
    }
}

impl fmt::Display for LwPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "/{}", self.object)?;
        if let Some(i) = self.instance {
            write!(f, "/{i}")?;
            if let Some(r) = self.resource {
                write!(f, "/{r}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for LwPath {
    type Err = Lwm2mError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || Lwm2mError::BadPath(s.to_string());
        let rest = s.strip_prefix('/').ok_or_else(bad)?;
        let parts: Vec<&str> = rest.split('/').collect();
        if parts.is_empty() || parts.len() > 3 {
            return Err(bad());
        }
        let num = |p: &str| p.parse::<u16>().map_err(|_| bad());
        Ok(LwPath {
            object: num(parts[0])?,
            instance: parts.get(1).map(|p| num(p)).transpose()?,
            resource: parts.get(2).map(|p| num(p)).transpose()?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectKind {
    Core,
    Sensor,
    Actuator,
    /// Outside the closed catalog but explicitly allowed.
    Extension,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectInfo {
    pub id: u16,
    pub name: &'static str,
    pub unit: &'static str,
    pub kind: ObjectKind,
}

const fn obj(id: u16, name: &'static str, unit: &'static str, kind: ObjectKind) -> ObjectInfo {
    ObjectInfo {
        id,
        name,
        unit,
        kind,
    }
}

pub static CATALOG: &[ObjectInfo] = &[
    obj(0, "LwM2M Security", "", ObjectKind::Core),
    obj(1, "LwM2M Server", "", ObjectKind::Core),
    obj(2, "Access Control", "", ObjectKind::Core),
    obj(3, "Device", "", ObjectKind::Core),
    obj(4, "Connectivity Monitoring", "", ObjectKind::Core),
    obj(5, "Firmware Update", "", ObjectKind::Core),
    obj(6, "Location", "", ObjectKind::Core),
    obj(7, "Connectivity Statistics", "", ObjectKind::Core),
    obj(3301, "Illuminance", "µW/cm²", ObjectKind::Sensor),
    obj(3303, "Temperature", "°C", ObjectKind::Sensor),
    obj(3304, "Humidity", "%", ObjectKind::Sensor),
    obj(3311, "Light Control", "", ObjectKind::Actuator),
    obj(3324, "Loudness", "dB SPL", ObjectKind::Sensor),
    obj(3325, "Concentration", "mg/mm³", ObjectKind::Sensor),
    obj(3330, "Distance", "cm", ObjectKind::Sensor),
    obj(3338, "Buzzer", "", ObjectKind::Actuator),
    obj(3348, "Multi-state Selector", "", ObjectKind::Sensor),
    obj(OBJ_ENERGY, "Power Measurement", "W", ObjectKind::Extension),
    obj(OBJ_WRISTBAND, "Wristband RSSI", "dBm", ObjectKind::Extension),
];

pub fn lookup(id: u16) -> Option<&'static ObjectInfo> {
    CATALOG.iter().find(|o| o.id == id)
}

/// True for objects whose 5700 resource is a periodic measurement.
pub fn is_measurement(id: u16) -> bool {
    matches!(
        lookup(id).map(|o| o.kind),
        Some(ObjectKind::Sensor | ObjectKind::Extension)
    )
}

pub fn unit_of(id: u16) -> &'static str {
    lookup(id).map(|o| o.unit).unwrap_or("")
}

/// One entry of a CoRE link-format list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub path: LwPath,
    pub attrs: Vec<(String, String)>,
}

impl Link {
    pub fn new(path: LwPath) -> Self {
        Link {
            path,
            attrs: Vec::new(),
        }
    }

    pub fn attr(&self, key: &str) -> Option<&str> {
        self.attrs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}>", self.path)?;
        for (k, v) in &self.attrs {
            write!(f, ";{k}=\"{v}\"")?;
        }
        Ok(())
    }
}

/// Parses `</3303/0>,</3304/0>;attr="x"`. Every link must be an
/// object/instance pair whose object is in the catalog.
pub fn parse_links(s: &str) -> Result<Vec<Link>, Lwm2mError> {
    let bad = |why: &str| Lwm2mError::BadLinkFormat(format!("{why} in {s:?}"));
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    let mut links = Vec::new();
    for entry in s.split(',') {
        let mut parts = entry.trim().split(';');
        let target = parts.next().unwrap_or("");
        let inner = target
            .strip_prefix('<')
            .and_then(|t| t.strip_suffix('>'))
            .ok_or_else(|| bad("missing <>"))?;
        let path: LwPath = inner.parse().map_err(|_| bad("bad path"))?;
        if path.instance.is_none() || path.resource.is_some() {
            return Err(bad("link is not /object/instance"));
        }
        if lookup(path.object).is_none() {
            return Err(Lwm2mError::UnknownObject(path.object));
        }
        let mut link = Link::new(path);
        for a in parts {
            let (k, v) = a.split_once('=').ok_or_else(|| bad("bad attribute"))?;
            link.attrs
                .push((k.trim().to_string(), v.trim().trim_matches('"').to_string()));
        }
        links.push(link);
    }
    Ok(links)
}

pub fn format_links(links: &[Link]) -> String {
    links
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// One measurement record: `{"n": "/3303/0/5700", "v": 22.5, "t": 1704067200.0}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub n: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vs: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vb: Option<bool>,
    /// unix seconds
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
}

impl Record {
    pub fn number(path: LwPath, v: f64, t: Option<f64>) -> Self {
        Record {
            n: path.to_string(),
            v: Some(v),
            vs: None,
            vb: None,
            t,
        }
    }

    pub fn from_value(path: LwPath, value: &ResourceValue, t: Option<f64>) -> Self {
        let mut r = Record {
            n: path.to_string(),
            v: None,
            vs: None,
            vb: None,
            t,
        };
        match value {
            ResourceValue::Float(f) => r.v = Some(*f),
            ResourceValue::Int(i) => r.v = Some(*i as f64),
            ResourceValue::Bool(b) => r.vb = Some(*b),
            ResourceValue::Str(s) => r.vs = Some(s.clone()),
            ResourceValue::Opaque(b) => r.vs = Some(hex::encode(b)),
        }
        r
    }

    pub fn path(&self) -> Result<LwPath, Lwm2mError> {
        self.n.parse()
    }
}

pub fn encode_records(records: &[Record]) -> Vec<u8> {
    serde_json::to_vec(records).expect("records serialize")
}

pub fn decode_records(payload: &[u8]) -> Result<Vec<Record>, Lwm2mError> {
    let recs: Vec<Record> =
        serde_json::from_slice(payload).map_err(|e| Lwm2mError::BadPayload(e.to_string()))?;
    for r in &recs {
        r.path()
            .map_err(|_| Lwm2mError::BadPayload(format!("bad record name {:?}", r.n)))?;
    }
    Ok(recs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_round_trip() {
        for s in ["/3303", "/3303/0", "/3303/0/5700"] {
            assert_eq!(s.parse::<LwPath>().unwrap().to_string(), s);
        }
        for bad in ["", "3303", "/x", "/1/2/3/4", "/70000"] {
            assert!(bad.parse::<LwPath>().is_err(), "{bad}");
        }
    }

    #[test]
    fn links_parse() {
        let l = parse_links("</3303/0>,</3304/0>").unwrap();
        assert_eq!(l.len(), 2);
        assert_eq!(l[1].path, LwPath::instance(3304, 0));
        let l = parse_links("</3/0>;fw=\"1.0.0\",</27000/2>").unwrap();
        assert_eq!(l[0].attr("fw"), Some("1.0.0"));
        assert_eq!(format_links(&l), "</3/0>;fw=\"1.0.0\",</27000/2>");
    }

    #[test]
    fn unknown_object_rejected() {
        assert_eq!(parse_links("</9999/0>"), Err(Lwm2mError::UnknownObject(9999)));
        assert!(matches!(
            parse_links("[/3303/0]"),
            Err(Lwm2mError::BadLinkFormat(_))
        ));
        assert!(matches!(
            parse_links("</3303>"),
            Err(Lwm2mError::BadLinkFormat(_))
        ));
    }

    #[test]
    fn records_round_trip() {
        let recs = vec![Record::number(
            LwPath::resource(3303, 0, 5700),
            22.5,
            Some(1_704_067_200.0),
        )];
        let bytes = encode_records(&recs);
        assert_eq!(
            std::str::from_utf8(&bytes).unwrap(),
            r#"[{"n":"/3303/0/5700","v":22.5,"t":1704067200.0}]"#
        );
        assert_eq!(decode_records(&bytes).unwrap(), recs);
        assert!(decode_records(b"{nope").is_err());
        assert!(decode_records(br#"[{"n":"bad","v":1}]"#).is_err());
    }

    #[test]
    fn catalog_closed() {
        assert!(is_measurement(3303));
        assert!(is_measurement(OBJ_WRISTBAND));
        assert!(!is_measurement(3338));
        assert!(!is_measurement(3));
        assert!(lookup(9999).is_none());
        assert_eq!(unit_of(3330), "cm");
    }
}
