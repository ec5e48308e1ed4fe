//! Append-only segment store partitioned by (site, day), plus the live
//! window, time-use diary and CSV export.

pub mod diary;
pub mod export;
pub mod live;

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use diary::{DiaryEntry, DiaryError, DiaryStore, SLOT_MS};
pub use export::{export_csv, parse_export, EXPORT_HEADER};
pub use live::LiveWindow;

use crate::clock::Timestamp;
use crate::reading::SensorReading;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad range: t0 {t0} > t1 {t1}")]
    BadRange { t0: Timestamp, t1: Timestamp },
    #[error("downsampling needs a positive limit")]
    BadLimit,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("corrupt segment {path}: {why}")]
    Corrupt { path: PathBuf, why: String },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub site: Option<String>,
    pub endpoint: Option<String>,
    pub object_id: Option<u16>,
    pub t0: Timestamp,
    pub t1: Timestamp,
    pub limit: Option<usize>,
    #[serde(default)]
    pub downsample: bool,
}

impl Query {
    pub fn range(t0: Timestamp, t1: Timestamp) -> Self {
        Query {
            t0,
            t1,
            ..Query::default()
        }
    }
}

/// One downsampling bucket of one series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub endpoint: String,
    pub object_id: u16,
    pub instance: u16,
    pub resource: u16,
    pub bucket_start: Timestamp,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", content = "rows", rename_all = "snake_case")]
pub enum QueryResult {
    Readings(Vec<SensorReading>),
    Buckets(Vec<Bucket>),
}

impl QueryResult {
    pub fn len(&self) -> usize {
        match self {
            QueryResult::Readings(r) => r.len(),
            QueryResult::Buckets(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn readings(self) -> Vec<SensorReading> {
        match self {
            QueryResult::Readings(r) => r,
            QueryResult::Buckets(_) => Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct IndexEntry {
    device_time: i64,
    segment: u32,
    offset: u64,
    len: u32,
}

#[derive(Debug)]
struct Segment {
    site: String,
    day: i64,
    path: PathBuf,
    file: File,
    size: u64,
    sealed: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StoreStats {
    pub stored: u64,
    pub deduped: u64,
    pub segments: usize,
    pub mirrored: u64,
    pub recovered_torn_bytes: u64,
}

type SeriesKey = (u32, u16);
type DedupKey = (u32, u16, u16, u16, i64);

/// Historical reading store.
///
/// Each record is `u32 length ‖ u32 crc32 ‖ body`, big-endian, with the body
/// in the [`SensorReading`] binary form. Appends reach the OS before
/// [`HistoricalStore::append`] returns.
#[derive(Debug)]
pub struct HistoricalStore {
    dir: PathBuf,
    mirror: Option<PathBuf>,
    segments: Vec<Segment>,
    open: HashMap<(String, i64), u32>,
    newest_day: HashMap<String, i64>,
    endpoints: HashMap<String, u32>,
    endpoint_names: Vec<String>,
    endpoint_site: Vec<String>,
    index: HashMap<SeriesKey, Vec<IndexEntry>>,
    dedup: HashSet<DedupKey>,
    stats: StoreStats,
}

fn day_name(day: i64) -> String {
    Timestamp(day * 86_400_000)
        .to_datetime()
        .format("%Y-%m-%d")
        .to_string()
}

fn parse_day(name: &str) -> Option<i64> {
    let d = chrono::NaiveDate::parse_from_str(name, "%Y-%m-%d").ok()?;
    let ts = d.and_hms_opt(0, 0, 0)?.and_utc().timestamp_millis();
    Some(ts.div_euclid(86_400_000))
}

fn is_safe_component(s: &str) -> bool {
    !s.is_empty()
        && s != "."
        && s != ".."
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl HistoricalStore {
    /// Opens the store in `dir`, replaying existing segments. A torn final
    /// record is truncated away.
    pub fn open(dir: impl AsRef<Path>, mirror: Option<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        if let Some(m) = &mirror {
            fs::create_dir_all(m)?;
        }
        let mut store = HistoricalStore {
            dir,
            mirror,
            segments: Vec::new(),
            open: HashMap::new(),
            newest_day: HashMap::new(),
            endpoints: HashMap::new(),
            endpoint_names: Vec::new(),
            endpoint_site: Vec::new(),
            index: HashMap::new(),
            dedup: HashSet::new(),
            stats: StoreStats::default(),
        };
        let mut found = Vec::new();
        for site in fs::read_dir(&store.dir)? {
            let site = site?;
            if !site.file_type()?.is_dir() {
                continue;
            }
            let site_name = site.file_name().to_string_lossy().into_owned();
            for seg in fs::read_dir(site.path())? {
                let seg = seg?;
                let name = seg.file_name().to_string_lossy().into_owned();
                if let Some(day) = name.strip_suffix(".seg").and_then(parse_day) {
                    found.push((site_name.clone(), day, seg.path()));
                }
            }
        }
        found.sort();
        for (site, day, path) in found {
            store.replay_segment(site, day, path)?;
        }
        Ok(store)
    }

    fn replay_segment(&mut self, site: String, day: i64, path: PathBuf) -> Result<(), StoreError> {
        let mut bytes = Vec::new();
        File::open(&path)?.read_to_end(&mut bytes)?;
        let seg_idx = self.segments.len() as u32;
        let mut off = 0usize;
        let mut good = Vec::new();
        while off + 8 <= bytes.len() {
            let len = u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
            let crc = u32::from_be_bytes(bytes[off + 4..off + 8].try_into().unwrap());
            let Some(body) = bytes.get(off + 8..off + 8 + len) else {
                break;
            };
            if crc32fast::hash(body) != crc {
                break;
            }
            let Ok(r) = SensorReading::decode(body) else {
                break;
            };
            good.push((r, off as u64, (8 + len) as u32));
            off += 8 + len;
        }
        if off < bytes.len() {
            log::warn!(
                "{}: truncating {} torn bytes",
                path.display(),
                bytes.len() - off
            );
            self.stats.recovered_torn_bytes += (bytes.len() - off) as u64;
            OpenOptions::new()
                .write(true)
                .open(&path)?
                .set_len(off as u64)?;
        }
        let file = OpenOptions::new().append(true).read(true).open(&path)?;
        self.segments.push(Segment {
            site: site.clone(),
            day,
            path,
            file,
            size: off as u64,
            sealed: false,
        });
        self.stats.segments = self.segments.len();
        self.open.insert((site.clone(), day), seg_idx);
        let newest = self.newest_day.entry(site).or_insert(day);
        *newest = (*newest).max(day);
        for (r, offset, len) in good {
            self.index_reading(&r, seg_idx, offset, len);
        }
        Ok(())
    }

    fn endpoint_id(&mut self, endpoint: &str, site: &str) -> u32 {
        if let Some(id) = self.endpoints.get(endpoint) {
            return *id;
        }
        let id = self.endpoint_names.len() as u32;
        self.endpoints.insert(endpoint.to_string(), id);
        self.endpoint_names.push(endpoint.to_string());
        self.endpoint_site.push(site.to_string());
        id
    }

    /// Returns false when the reading is a duplicate and was not stored.
    fn index_reading(&mut self, r: &SensorReading, segment: u32, offset: u64, len: u32) -> bool {
        let ep = self.endpoint_id(&r.endpoint, &r.site);
        let key = (ep, r.object_id, r.instance, r.resource, r.device_time.0);
        if !self.dedup.insert(key) {
            return false;
        }
        let entries = self.index.entry((ep, r.object_id)).or_default();
        let e = IndexEntry {
            device_time: r.device_time.0,
            segment,
            offset,
            len,
        };
        if entries.last().is_none_or(|l| l.device_time <= e.device_time) {
            entries.push(e);
        } else {
            let pos = entries.partition_point(|x| x.device_time <= e.device_time);
            entries.insert(pos, e);
        }
        self.stats.stored += 1;
        true
    }

    pub fn is_duplicate(&self, r: &SensorReading) -> bool {
        self.endpoints.get(&r.endpoint).is_some_and(|ep| {
            self.dedup
                .contains(&(*ep, r.object_id, r.instance, r.resource, r.device_time.0))
        })
    }

    fn segment_for(&mut self, site: &str, day: i64) -> Result<u32, StoreError> {
        if let Some(&i) = self.open.get(&(site.to_string(), day)) {
            let seg = &mut self.segments[i as usize];
            seg.sealed = false;
            return Ok(i);
        }
        if !is_safe_component(site) {
            return Err(StoreError::Io(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("site {site:?} is not a valid partition name"),
            )));
        }
        let dir = self.dir.join(site);
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{}.seg", day_name(day)));
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .read(true)
            .open(&path)?;
        let size = file.metadata()?.len();
        let i = self.segments.len() as u32;
        self.segments.push(Segment {
            site: site.to_string(),
            day,
            path,
            file,
            size,
            sealed: false,
        });
        self.stats.segments = self.segments.len();
        self.open.insert((site.to_string(), day), i);
        Ok(i)
    }

    /// Seals every segment of `site` older than `day` and copies it to the
    /// mirror directory.
    fn rotate(&mut self, site: &str, day: i64) -> Result<(), StoreError> {
        let newest = self.newest_day.entry(site.to_string()).or_insert(day);
        if day <= *newest {
            return Ok(());
        }
        *newest = day;
        for i in 0..self.segments.len() {
            let s = &self.segments[i];
            if s.site == site && s.day < day && !s.sealed {
                self.seal(i)?;
            }
        }
        Ok(())
    }

    fn seal(&mut self, i: usize) -> Result<(), StoreError> {
        let s = &mut self.segments[i];
        s.file.sync_data()?;
        s.sealed = true;
        if let Some(m) = &self.mirror {
            let dst_dir = m.join(&s.site);
            fs::create_dir_all(&dst_dir)?;
            fs::copy(&s.path, dst_dir.join(s.path.file_name().expect("segment file name")))?;
            self.stats.mirrored += 1;
        }
        Ok(())
    }

    /// Appends unless a reading with the same (endpoint, path, device_time)
    /// is already stored. Returns whether it was stored.
    pub fn append(&mut self, r: &SensorReading) -> Result<bool, StoreError> {
        if self.is_duplicate(r) {
            self.stats.deduped += 1;
            return Ok(false);
        }
        let day = r.device_time.day_index();
        self.rotate(&r.site, day)?;
        let seg_idx = self.segment_for(&r.site, day)?;
        let mut rec = Vec::with_capacity(128);
        rec.extend_from_slice(&[0u8; 8]);
        r.encode_into(&mut rec);
        let body_len = (rec.len() - 8) as u32;
        let crc = crc32fast::hash(&rec[8..]);
        rec[..4].copy_from_slice(&body_len.to_be_bytes());
        rec[4..8].copy_from_slice(&crc.to_be_bytes());
        let seg = &mut self.segments[seg_idx as usize];
        let offset = seg.size;
        seg.file.write_all(&rec)?;
        seg.file.flush()?;
        seg.size += rec.len() as u64;
        self.index_reading(r, seg_idx, offset, rec.len() as u32);
        Ok(true)
    }

    /// Fsyncs every open segment.
    pub fn sync(&mut self) -> Result<(), StoreError> {
        for s in &mut self.segments {
            s.file.sync_data()?;
        }
        Ok(())
    }

    fn read_entry(&self, e: &IndexEntry) -> Result<SensorReading, StoreError> {
        let seg = &self.segments[e.segment as usize];
        let mut buf = vec![0u8; e.len as usize];
        read_exact_at(&seg.file, &mut buf, e.offset)?;
        let body = &buf[8..];
        let crc = u32::from_be_bytes(buf[4..8].try_into().unwrap());
        if crc32fast::hash(body) != crc {
            return Err(StoreError::Corrupt {
                path: seg.path.clone(),
                why: format!("crc mismatch at offset {}", e.offset),
            });
        }
        SensorReading::decode(body).map_err(|err| StoreError::Corrupt {
            path: seg.path.clone(),
            why: err.to_string(),
        })
    }

    fn matching_series(&self, q: &Query) -> Vec<SeriesKey> {
        let mut keys: Vec<SeriesKey> = self
            .index
            .keys()
            .filter(|(ep, obj)| {
                q.endpoint
                    .as_ref()
                    .is_none_or(|e| self.endpoints.get(e) == Some(ep))
                    && q.object_id.is_none_or(|o| o == *obj)
                    && q
                        .site
                        .as_ref()
                        .is_none_or(|s| self.endpoint_site[*ep as usize] == *s)
            })
            .copied()
            .collect();
        keys.sort();
        keys
    }

    fn collect(&self, q: &Query) -> Result<Vec<SensorReading>, StoreError> {
        let mut out = Vec::new();
        for key in self.matching_series(q) {
            let entries = &self.index[&key];
            let lo = entries.partition_point(|e| e.device_time < q.t0.0);
            let hi = entries.partition_point(|e| e.device_time < q.t1.0);
            for e in &entries[lo..hi] {
                out.push(self.read_entry(e)?);
            }
        }
        out.sort_by(|a, b| {
            (a.device_time, &a.endpoint, a.object_id, a.instance, a.resource).cmp(&(
                b.device_time,
                &b.endpoint,
                b.object_id,
                b.instance,
                b.resource,
            ))
        });
        Ok(out)
    }

    /// Readings in `[t0, t1)` ordered by device time, or bucket means of
    /// width `(t1 - t0) / limit` per series when `downsample` is set.
    pub fn query(&self, q: &Query) -> Result<QueryResult, StoreError> {
        if q.t0 > q.t1 {
            return Err(StoreError::BadRange { t0: q.t0, t1: q.t1 });
        }
        if q.t0 == q.t1 {
            return Ok(if q.downsample {
                QueryResult::Buckets(Vec::new())
            } else {
                QueryResult::Readings(Vec::new())
            });
        }
        let mut rows = self.collect(q)?;
        if !q.downsample {
            if let Some(l) = q.limit {
                rows.truncate(l);
            }
            return Ok(QueryResult::Readings(rows));
        }
        let limit = q.limit.filter(|l| *l > 0).ok_or(StoreError::BadLimit)? as i128;
        let span = (q.t1.0 - q.t0.0) as i128;
        type BucketKey = (String, u16, u16, u16, i128);
        let mut acc: std::collections::BTreeMap<BucketKey, (f64, f64, f64, usize)> =
            std::collections::BTreeMap::new();
        for r in &rows {
            let b = (r.device_time.0 - q.t0.0) as i128 * limit / span;
            let e = acc
                .entry((r.endpoint.clone(), r.object_id, r.instance, r.resource, b))
                .or_insert((0.0, f64::INFINITY, f64::NEG_INFINITY, 0));
            e.0 += r.value;
            e.1 = e.1.min(r.value);
            e.2 = e.2.max(r.value);
            e.3 += 1;
        }
        let mut buckets: Vec<Bucket> = acc
            .into_iter()
            .map(|((endpoint, object_id, instance, resource, b), (sum, min, max, n))| Bucket {
                endpoint,
                object_id,
                instance,
                resource,
                bucket_start: Timestamp(q.t0.0 + (b * span / limit) as i64),
                mean: sum / n as f64,
                min,
                max,
                count: n,
            })
            .collect();
        buckets.sort_by(|a, b| {
            (a.bucket_start, &a.endpoint, a.object_id).cmp(&(b.bucket_start, &b.endpoint, b.object_id))
        });
        Ok(QueryResult::Buckets(buckets))
    }

    /// Every stored reading, in device-time order.
    pub fn all(&self) -> Result<Vec<SensorReading>, StoreError> {
        self.collect(&Query::range(Timestamp(i64::MIN), Timestamp(i64::MAX)))
    }

    pub fn count(&self) -> u64 {
        self.stats.stored
    }

    /// Number of stored readings for one series in `[t0, t1)`.
    pub fn series_count(&self, endpoint: &str, object_id: u16, t0: Timestamp, t1: Timestamp) -> usize {
        let Some(ep) = self.endpoints.get(endpoint) else {
            return 0;
        };
        self.index.get(&(*ep, object_id)).map_or(0, |entries| {
            entries.partition_point(|e| e.device_time < t1.0)
                - entries.partition_point(|e| e.device_time < t0.0)
        })
    }

    pub fn stats(&self) -> StoreStats {
        self.stats
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn endpoints(&self) -> Vec<String> {
        let mut v = self.endpoint_names.clone();
        v.sort();
        v
    }

    pub fn segment_paths(&self) -> Vec<PathBuf> {
        self.segments.iter().map(|s| s.path.clone()).collect()
    }

    /// Deletes whole segments whose day ends before `cutoff`. Returns how
    /// many were removed.
    pub fn delete_older_than(&mut self, cutoff: Timestamp) -> Result<usize, StoreError> {
        let cutoff_day = cutoff.day_index();
        let doomed: HashSet<u32> = self
            .segments
            .iter()
            .enumerate()
            .filter(|(_, s)| s.day < cutoff_day)
            .map(|(i, _)| i as u32)
            .collect();
        if doomed.is_empty() {
            return Ok(0);
        }
        for &i in &doomed {
            fs::remove_file(&self.segments[i as usize].path)?;
        }
        let dir = self.dir.clone();
        let mirror = self.mirror.clone();
        *self = HistoricalStore::open(dir, mirror)?;
        Ok(doomed.len())
    }
}

#[cfg(unix)]
fn read_exact_at(f: &File, buf: &mut [u8], offset: u64) -> io::Result<()> {
    use std::os::unix::fs::FileExt;
    f.read_exact_at(buf, offset)
}

#[cfg(not(unix))]
fn read_exact_at(f: &File, buf: &mut [u8], offset: u64) -> io::Result<()> {
    use std::os::windows::fs::FileExt;
    let mut done = 0;
    while done < buf.len() {
        let n = f.seek_read(&mut buf[done..], offset + done as u64)?;
        if n == 0 {
            return Err(io::ErrorKind::UnexpectedEof.into());
        }
        done += n;
    }
    Ok(())
}
