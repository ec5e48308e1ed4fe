use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;

pub const SLOT_MS: i64 = 10 * 60 * 1000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiaryEntry {
    pub site: String,
    pub slot_start: Timestamp,
    pub activity_code: i32,
    pub location: String,
    pub who: String,
}

#[derive(Debug, Error)]
pub enum DiaryError {
    #[error("bad diary csv at line {line}: {why}")]
    BadCsv { line: u64, why: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Deserialize)]
struct Row {
    slot_start: String,
    activity_code: i32,
    location: String,
    who: String,
}

/// Time-use diary entries per (pseudonymous) site.
#[derive(Debug, Default)]
pub struct DiaryStore {
    dir: Option<PathBuf>,
    entries: BTreeMap<String, Vec<DiaryEntry>>,
}

impl DiaryStore {
    pub fn in_memory() -> Self {
        DiaryStore::default()
    }

    pub fn open(dir: impl AsRef<Path>) -> io::Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut s = DiaryStore {
            dir: Some(dir.clone()),
            entries: BTreeMap::new(),
        };
        for f in fs::read_dir(&dir)? {
            let f = f?;
            if f.path().extension().is_some_and(|e| e == "jsonl") {
                for line in fs::read_to_string(f.path())?.lines() {
                    if let Ok(e) = serde_json::from_str::<DiaryEntry>(line) {
                        s.entries.entry(e.site.clone()).or_default().push(e);
                    }
                }
            }
        }
        for v in s.entries.values_mut() {
            v.sort_by_key(|e| e.slot_start);
        }
        Ok(s)
    }

    /// Imports `slot_start,activity_code,location,who` rows for `site`
    /// (already pseudonymous). `map_who` pseudonymizes the person column.
    /// Nothing is stored unless every row is valid.
    pub fn import(
        &mut self,
        site: &str,
        csv_text: &str,
        mut map_who: impl FnMut(&str) -> io::Result<String>,
    ) -> Result<usize, DiaryError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(csv_text.as_bytes());
        let headers = rdr
            .headers()
            .map_err(|e| DiaryError::BadCsv {
                line: 1,
                why: e.to_string(),
            })?
            .clone();
        for col in ["slot_start", "activity_code", "location", "who"] {
            if !headers.iter().any(|h| h == col) {
                return Err(DiaryError::BadCsv {
                    line: 1,
                    why: format!("missing column {col}"),
                });
            }
        }
        let mut new = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| DiaryError::BadCsv {
                line: e.position().map_or(0, |p| p.line()),
                why: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let bad = |why: String| DiaryError::BadCsv { line, why };
            let row: Row = rec.deserialize(Some(&headers)).map_err(|e| bad(e.to_string()))?;
            let slot = Timestamp::parse_rfc3339(&row.slot_start)
                .ok_or_else(|| bad(format!("slot_start {:?} is not RFC 3339", row.slot_start)))?;
            if slot.0.rem_euclid(SLOT_MS) != 0 {
                return Err(bad(format!(
                    "slot_start {} is not aligned to 10 minutes",
                    row.slot_start
                )));
            }
            new.push(DiaryEntry {
                site: site.to_string(),
                slot_start: slot,
                activity_code: row.activity_code,
                location: row.location,
                who: map_who(&row.who)?,
            });
        }
        if let Some(dir) = &self.dir {
            use std::io::Write;
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(format!("{site}.jsonl")))?;
            for e in &new {
                serde_json::to_writer(&mut f, e).map_err(io::Error::from)?;
                f.write_all(b"\n")?;
            }
            f.flush()?;
        }
        let n = new.len();
        let v = self.entries.entry(site.to_string()).or_default();
        v.extend(new);
        v.sort_by_key(|e| e.slot_start);
        Ok(n)
    }

    /// Entries whose 10-minute slot intersects `[t0, t1)`.
    pub fn overlay(&self, site: &str, t0: Timestamp, t1: Timestamp) -> Vec<DiaryEntry> {
        self.entries
            .get(site)
            .map(|v| {
                v.iter()
                    .filter(|e| e.slot_start.0 < t1.0 && e.slot_start.0 + SLOT_MS > t0.0)
                    .cloned()
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
