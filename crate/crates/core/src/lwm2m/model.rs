use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Link, Lwm2mError, LwPath};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ResourceValue {
    Float(f64),
    Int(i64),
    Bool(bool),
    Str(String),
    Opaque(Vec<u8>),
}

impl ResourceValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ResourceValue::Float(f) => Some(*f),
            ResourceValue::Int(i) => Some(*i as f64),
            ResourceValue::Bool(b) => Some(*b as u8 as f64),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ResourceValue::Str(s) => Some(s),
            _ => None,
        }
    }

    /// Text/plain wire form.
    pub fn to_text(&self) -> String {
        match self {
            ResourceValue::Float(f) => f.to_string(),
            ResourceValue::Int(i) => i.to_string(),
            ResourceValue::Bool(b) => (*b as u8).to_string(),
            ResourceValue::Str(s) => s.clone(),
            ResourceValue::Opaque(b) => hex::encode(b),
        }
    }

    /// Parses text using the existing value's type as a template.
    pub fn parse_like(&self, text: &str) -> Option<ResourceValue> {
        let t = text.trim();
        Some(match self {
            ResourceValue::Float(_) => ResourceValue::Float(t.parse().ok()?),
            ResourceValue::Int(_) => ResourceValue::Int(t.parse().ok()?),
            ResourceValue::Bool(_) => ResourceValue::Bool(match t {
                "1" | "true" => true,
                "0" | "false" => false,
                _ => return None,
            }),
            ResourceValue::Str(_) => ResourceValue::Str(text.to_string()),
            ResourceValue::Opaque(_) => ResourceValue::Opaque(hex::decode(t).ok()?),
        })
    }
}

impl fmt::Display for ResourceValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Operations {
    pub read: bool,
    pub write: bool,
    pub execute: bool,
}

impl Operations {
    pub const R: Operations = Operations {
        read: true,
        write: false,
        execute: false,
    };
    pub const RW: Operations = Operations {
        read: true,
        write: true,
        execute: false,
    };
    pub const E: Operations = Operations {
        read: false,
        write: false,
        execute: true,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct Resource {
    pub value: Option<ResourceValue>,
    pub ops: Operations,
}

type Instances = BTreeMap<u16, BTreeMap<u16, Resource>>;

/// Client side object tree.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObjectModel {
    objects: BTreeMap<u16, Instances>,
}

impl ObjectModel {
    pub fn new() -> Self {
        ObjectModel::default()
    }

    pub fn define(&mut self, path: LwPath, ops: Operations, value: Option<ResourceValue>) {
        let (Some(i), Some(r)) = (path.instance, path.resource) else {
            panic!("define needs a resource path, got {path}");
        };
        self.objects
            .entry(path.object)
            .or_default()
            .entry(i)
            .or_default()
            .insert(r, Resource { value, ops });
    }

    pub fn remove_instance(&mut self, object: u16, instance: u16) {
        if let Some(o) = self.objects.get_mut(&object) {
            o.remove(&instance);
        }
    }

    pub fn resource(&self, path: LwPath) -> Option<&Resource> {
        self.objects
            .get(&path.object)?
            .get(&path.instance?)?
            .get(&path.resource?)
    }

    fn resource_mut(&mut self, path: LwPath) -> Option<&mut Resource> {
        self.objects
            .get_mut(&path.object)?
            .get_mut(&path.instance?)?
            .get_mut(&path.resource?)
    }

    pub fn contains(&self, path: LwPath) -> bool {
        match (path.instance, path.resource) {
            (None, _) => self.objects.contains_key(&path.object),
            (Some(i), None) => self
                .objects
                .get(&path.object)
                .is_some_and(|o| o.contains_key(&i)),
            _ => self.resource(path).is_some(),
        }
    }

    pub fn get(&self, path: LwPath) -> Option<&ResourceValue> {
        self.resource(path)?.value.as_ref()
    }

    /// Internal update (sensor sampling); ignores access flags.
    pub fn set(&mut self, path: LwPath, value: ResourceValue) -> Result<(), Lwm2mError> {
        let r = self
            .resource_mut(path)
            .ok_or_else(|| Lwm2mError::PathNotFound(path.to_string()))?;
        r.value = Some(value);
        Ok(())
    }

    /// Readable resources under `path` with their values.
    pub fn read(&self, path: LwPath) -> Result<Vec<(LwPath, ResourceValue)>, Lwm2mError> {
        if !self.contains(path) {
            return Err(Lwm2mError::PathNotFound(path.to_string()));
        }
        let mut out = Vec::new();
        for (&o, insts) in self.objects.range(path.object..=path.object) {
            for (&i, res) in insts {
                if path.instance.is_some_and(|pi| pi != i) {
                    continue;
                }
                for (&r, rv) in res {
                    if path.resource.is_some_and(|pr| pr != r) {
                        continue;
                    }
                    if let (true, Some(v)) = (rv.ops.read, &rv.value) {
                        out.push((LwPath::resource(o, i, r), v.clone()));
                    }
                }
            }
        }
        if out.is_empty() && path.is_resource() {
            return Err(Lwm2mError::PathNotFound(path.to_string()));
        }
        Ok(out)
    }

    /// Remote write from text.
    pub fn write_text(&mut self, path: LwPath, text: &str) -> Result<ResourceValue, Lwm2mError> {
        let r = self
            .resource_mut(path)
            .ok_or_else(|| Lwm2mError::PathNotFound(path.to_string()))?;
        if !r.ops.write {
            return Err(Lwm2mError::NotWritable(path.to_string()));
        }
        let template = r
            .value
            .clone()
            .unwrap_or(ResourceValue::Str(String::new()));
        let v = template
            .parse_like(text)
            .ok_or_else(|| Lwm2mError::BadPayload(format!("{text:?} for {path}")))?;
        r.value = Some(v.clone());
        Ok(v)
    }

    pub fn check_execute(&self, path: LwPath) -> Result<(), Lwm2mError> {
        let r = self
            .resource(path)
            .ok_or_else(|| Lwm2mError::PathNotFound(path.to_string()))?;
        if r.ops.execute {
            Ok(())
        } else {
            Err(Lwm2mError::NotExecutable(path.to_string()))
        }
    }

    /// Object instance links for registration (core objects 0, 1 and 2
    /// are never advertised).
    pub fn links(&self) -> Vec<Link> {
        self.objects
            .iter()
            .filter(|(&o, _)| o > 2)
            .flat_map(|(&o, insts)| insts.keys().map(move |&i| Link::new(LwPath::instance(o, i))))
            .collect()
    }

    pub fn instances(&self, object: u16) -> Vec<u16> {
        self.objects
            .get(&object)
            .map(|o| o.keys().copied().collect())
            .unwrap_or_default()
    }
}
