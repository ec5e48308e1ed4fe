use std::collections::BTreeSet;
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::lwm2m::LwPath;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlacklistEntry {
    pub endpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<LwPath>,
}

impl BlacklistEntry {
    /// True when this entry blocks `path` on `endpoint`. An entry path
    /// blocks itself and everything beneath it.
    pub fn covers(&self, endpoint: &str, path: LwPath) -> bool {
        if self.endpoint != endpoint {
            return false;
        }
        match self.path {
            None => true,
            Some(p) => {
                p.object == path.object
                    && (p.instance.is_none() || p.instance == path.instance)
                    && (p.resource.is_none() || p.resource == path.resource)
            }
        }
    }
}

impl fmt::Display for BlacklistEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.path {
            Some(p) => write!(f, "{} {p}", self.endpoint),
            None => f.write_str(&self.endpoint),
        }
    }
}

impl FromStr for BlacklistEntry {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut it = s.split_whitespace();
        let endpoint = it.next().ok_or("empty blacklist line")?.to_string();
        let path = it
            .next()
            .map(|p| p.parse::<LwPath>().map_err(|e| e.to_string()))
            .transpose()?;
        if it.next().is_some() {
            return Err(format!("trailing fields in {s:?}"));
        }
        Ok(BlacklistEntry { endpoint, path })
    }
}

/// Endpoints or (endpoint, path) pairs that must never be observed,
/// optionally persisted as one entry per line.
#[derive(Debug, Default)]
pub struct Blacklist {
    entries: BTreeSet<BlacklistEntry>,
    file: Option<PathBuf>,
}

impl Blacklist {
    pub fn new() -> Self {
        Blacklist::default()
    }

    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut b = Blacklist::new();
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                for (i, line) in text.lines().enumerate() {
                    let line = line.trim();
                    if line.is_empty() || line.starts_with('#') {
                        continue;
                    }
                    let e = line.parse().map_err(|e| {
                        io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
                    })?;
                    b.entries.insert(e);
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e),
        }
        b.file = Some(path);
        Ok(b)
    }

    fn persist(&self) -> io::Result<()> {
        if let Some(p) = &self.file {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir)?;
            }
            let text: String = self.entries.iter().map(|e| format!("{e}\n")).collect();
            std::fs::write(p, text)?;
        }
        Ok(())
    }

    /// Returns false when the entry was already present.
    pub fn add(&mut self, entry: BlacklistEntry) -> io::Result<bool> {
        let added = self.entries.insert(entry);
        if added {
            self.persist()?;
        }
        Ok(added)
    }

    pub fn remove(&mut self, entry: &BlacklistEntry) -> io::Result<bool> {
        let removed = self.entries.remove(entry);
        if removed {
            self.persist()?;
        }
        Ok(removed)
    }

    pub fn is_blocked(&self, endpoint: &str, path: LwPath) -> bool {
        self.entries.iter().any(|e| e.covers(endpoint, path))
    }

    pub fn entries(&self) -> Vec<BlacklistEntry> {
        self.entries.iter().cloned().collect()
    }
}
