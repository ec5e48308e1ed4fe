use std::collections::HashMap;
use std::net::SocketAddr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{parse_links, Link, Lwm2mError};
use crate::clock::Timestamp;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    pub endpoint: String,
    pub lifetime_s: u32,
    pub registration_id: String,
    pub links: Vec<Link>,
    pub address: SocketAddr,
    pub registered_at: Timestamp,
    pub last_update: Timestamp,
}

impl Registration {
    pub fn expires_at(&self) -> Timestamp {
        self.last_update + Duration::from_secs(self.lifetime_s as u64)
    }

    /// Firmware version advertised as `</3/0>;fw="x.y.z"`.
    pub fn firmware_version(&self) -> Option<&str> {
        self.links.iter().find_map(|l| l.attr("fw"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeregReason {
    Explicit,
    Expired,
    Replaced,
}

#[derive(Debug, Default)]
pub struct Registry {
    by_id: HashMap<String, Registration>,
    by_endpoint: HashMap<String, String>,
    next_id: u64,
}

impl Registry {
    pub fn new() -> Self {
        Registry::default()
    }

    /// Stores a registration, returning it and any registration it replaced.
    pub fn register(
        &mut self,
        endpoint: &str,
        lifetime_s: u32,
        links: &str,
        address: SocketAddr,
        now: Timestamp,
    ) -> Result<(Registration, Option<Registration>), Lwm2mError> {
        if endpoint.is_empty() {
            return Err(Lwm2mError::BadLinkFormat("empty endpoint name".into()));
        }
        let links = parse_links(links)?;
        let replaced = self
            .by_endpoint
            .remove(endpoint)
            .and_then(|id| self.by_id.remove(&id));
        self.next_id += 1;
        let reg = Registration {
            endpoint: endpoint.to_string(),
            lifetime_s,
            registration_id: format!("{:x}", self.next_id),
            links,
            address,
            registered_at: now,
            last_update: now,
        };
        self.by_endpoint
            .insert(reg.endpoint.clone(), reg.registration_id.clone());
        self.by_id.insert(reg.registration_id.clone(), reg.clone());
        Ok((reg, replaced))
    }

    pub fn update(
        &mut self,
        registration_id: &str,
        lifetime_s: Option<u32>,
        links: Option<&str>,
        address: SocketAddr,
        now: Timestamp,
    ) -> Result<&Registration, Lwm2mError> {
        let links = links.map(parse_links).transpose()?;
        let reg = self
            .by_id
            .get_mut(registration_id)
            .ok_or_else(|| Lwm2mError::UnknownRegistration(registration_id.into()))?;
        reg.last_update = now;
        reg.address = address;
        if let Some(lt) = lifetime_s {
            reg.lifetime_s = lt;
        }
        if let Some(l) = links {
            reg.links = l;
        }
        Ok(reg)
    }

    pub fn deregister(&mut self, registration_id: &str) -> Result<Registration, Lwm2mError> {
        let reg = self
            .by_id
            .remove(registration_id)
            .ok_or_else(|| Lwm2mError::UnknownRegistration(registration_id.into()))?;
        self.by_endpoint.remove(&reg.endpoint);
        Ok(reg)
    }

    /// Removes every registration whose lifetime has run out at `now`.
    pub fn expire(&mut self, now: Timestamp) -> Vec<Registration> {
        let mut ids: Vec<String> = self
            .by_id
            .values()
            .filter(|r| now >= r.expires_at())
            .map(|r| r.registration_id.clone())
            .collect();
        ids.sort();
        ids.iter()
            .filter_map(|id| self.deregister(id).ok())
            .collect()
    }

    pub fn next_expiry(&self) -> Option<Timestamp> {
        self.by_id.values().map(|r| r.expires_at()).min()
    }

    pub fn by_id(&self, registration_id: &str) -> Option<&Registration> {
        self.by_id.get(registration_id)
    }

    pub fn by_endpoint(&self, endpoint: &str) -> Option<&Registration> {
        self.by_id.get(self.by_endpoint.get(endpoint)?)
    }

    pub fn by_address(&self, address: SocketAddr) -> Option<&Registration> {
        self.by_id.values().find(|r| r.address == address)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    /// Registrations sorted by endpoint.
    pub fn list(&self) -> Vec<&Registration> {
        let mut v: Vec<_> = self.by_id.values().collect();
        v.sort_by(|a, b| a.endpoint.cmp(&b.endpoint));
        v
    }
}
