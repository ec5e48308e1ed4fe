use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Raw identifier → random 128-bit hex token. When backed by a file, the
/// file is created owner-only and is the sole place raw identifiers are
/// written.
#[derive(Debug)]
pub struct PseudonymTable {
    forward: HashMap<String, String>,
    tokens: HashSet<String>,
    rng: ChaCha20Rng,
    file: Option<(PathBuf, File)>,
}

fn open_private(path: &Path) -> io::Result<File> {
    let mut opts = OpenOptions::new();
    opts.create(true).append(true).read(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    opts.open(path)
}

impl PseudonymTable {
    pub fn in_memory(seed: u64) -> Self {
        PseudonymTable {
            forward: HashMap::new(),
            tokens: HashSet::new(),
            rng: ChaCha20Rng::seed_from_u64(seed),
            file: None,
        }
    }

    /// Opens or creates the table at `path`. Lines are `raw<TAB>token`.
    pub fn open(path: impl AsRef<Path>, seed: u64) -> io::Result<Self> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = open_private(path)?;
        let mut t = PseudonymTable::in_memory(seed);
        for line in BufReader::new(&file).lines() {
            let line = line?;
            let Some((raw, token)) = line.split_once('\t') else {
                continue;
            };
            t.tokens.insert(token.to_string());
            t.forward.insert(raw.to_string(), token.to_string());
        }
        t.file = Some((path.to_path_buf(), file));
        Ok(t)
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }

    pub fn lookup(&self, raw: &str) -> Option<&str> {
        self.forward.get(raw).map(String::as_str)
    }

    /// Existing token for `raw`, or a fresh one persisted first.
    pub fn token_for(&mut self, raw: &str) -> io::Result<String> {
        if let Some(t) = self.forward.get(raw) {
            return Ok(t.clone());
        }
        let token = loop {
            let mut b = [0u8; 16];
            self.rng.fill_bytes(&mut b);
            let t = hex::encode(b);
            if !self.tokens.contains(&t) {
                break t;
            }
        };
        if let Some((_, f)) = &mut self.file {
            writeln!(f, "{raw}\t{token}")?;
            f.flush()?;
        }
        self.tokens.insert(token.clone());
        self.forward.insert(raw.to_string(), token.clone());
        Ok(token)
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn raw_ids(&self) -> impl Iterator<Item = &str> {
        self.forward.keys().map(String::as_str)
    }
}

/// Splits `[<site>.]<device>` into (site, device).
pub fn split_endpoint<'a>(raw: &'a str, default_site: &'a str) -> (&'a str, &'a str) {
    match raw.split_once('.') {
        Some((site, dev)) if !site.is_empty() && !dev.is_empty() => (site, dev),
        _ => (default_site, raw),
    }
}

/// Pseudonymous identity of one raw endpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoIds {
    /// token for the site
    pub site: String,
    /// token for the full raw endpoint
    pub pseudonym: String,
    /// `<site token>-<device>`
    pub endpoint: String,
}

/// Caching front end over a [`PseudonymTable`].
#[derive(Debug)]
pub struct Pseudonymizer {
    pub table: PseudonymTable,
    default_site: String,
    cache: HashMap<String, PseudoIds>,
}

impl Pseudonymizer {
    pub fn new(table: PseudonymTable, default_site: impl Into<String>) -> Self {
        Pseudonymizer {
            table,
            default_site: default_site.into(),
            cache: HashMap::new(),
        }
    }

    pub fn default_site(&self) -> &str {
        &self.default_site
    }

    pub fn ids(&mut self, raw_endpoint: &str) -> io::Result<PseudoIds> {
        if let Some(ids) = self.cache.get(raw_endpoint) {
            return Ok(ids.clone());
        }
        let (site, device) = split_endpoint(raw_endpoint, &self.default_site);
        let (site, device) = (site.to_string(), device.to_string());
        let site_token = self.table.token_for(&format!("site:{site}"))?;
        let pseudonym = self.table.token_for(&format!("endpoint:{raw_endpoint}"))?;
        let ids = PseudoIds {
            endpoint: format!("{site_token}-{device}"),
            site: site_token,
            pseudonym,
        };
        self.cache.insert(raw_endpoint.to_string(), ids.clone());
        Ok(ids)
    }

    /// Site token for a raw site id.
    pub fn site_token(&mut self, raw_site: &str) -> io::Result<String> {
        self.table.token_for(&format!("site:{raw_site}"))
    }

    /// Token for a raw person identifier (diary `who`).
    pub fn person_token(&mut self, raw: &str) -> io::Result<String> {
        self.table.token_for(&format!("person:{raw}"))
    }

    /// Pseudonymous endpoint for a raw endpoint, if one was ever issued.
    pub fn lookup_endpoint(&self, raw_endpoint: &str) -> Option<String> {
        if let Some(ids) = self.cache.get(raw_endpoint) {
            return Some(ids.endpoint.clone());
        }
        let (site, device) = split_endpoint(raw_endpoint, &self.default_site);
        self.table.lookup(&format!("endpoint:{raw_endpoint}"))?;
        let site_token = self.table.lookup(&format!("site:{site}"))?;
        Some(format!("{site_token}-{device}"))
    }

    pub fn lookup_site(&self, raw_site: &str) -> Option<&str> {
        self.table.lookup(&format!("site:{raw_site}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_are_random_stable_and_injective() {
        let mut t = PseudonymTable::in_memory(1);
        let a = t.token_for("H3").unwrap();
        assert_eq!(a.len(), 32);
        assert!(a.chars().all(|c| c.is_ascii_hexdigit()));
        assert_eq!(t.token_for("H3").unwrap(), a);
        let b = t.token_for("H4").unwrap();
        assert_ne!(a, b);
        // not derived from the raw id: another seed gives another token
        let mut t2 = PseudonymTable::in_memory(2);
        assert_ne!(t2.token_for("H3").unwrap(), a);
    }

    #[test]
    fn file_is_private_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("secret/pseudonyms.tsv");
        let tok = {
            let mut t = PseudonymTable::open(&p, 7).unwrap();
            t.token_for("household-03").unwrap()
        };
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            let mode = std::fs::metadata(&p).unwrap().permissions().mode();
            assert_eq!(mode & 0o777, 0o600);
        }
        let mut t = PseudonymTable::open(&p, 7).unwrap();
        assert_eq!(t.lookup("household-03"), Some(tok.as_str()));
        // same seed after reload must not reissue the existing token
        let other = t.token_for("household-04").unwrap();
        assert_ne!(other, tok);
    }

    #[test]
    fn endpoint_ids_hide_site() {
        let mut p = Pseudonymizer::new(PseudonymTable::in_memory(3), "office");
        let ids = p.ids("H3.egg-017").unwrap();
        assert!(!ids.endpoint.contains("H3"));
        assert!(ids.endpoint.ends_with("-egg-017"));
        assert_eq!(ids.site, p.site_token("H3").unwrap());
        assert_eq!(p.lookup_endpoint("H3.egg-017"), Some(ids.endpoint.clone()));
        let office = p.ids("egg-001").unwrap();
        assert_eq!(Some(office.site.as_str()), p.lookup_site("office"));
        assert_eq!(p.lookup_endpoint("nobody"), None);
    }

    #[test]
    fn split() {
        assert_eq!(split_endpoint("H3.egg-1", "o"), ("H3", "egg-1"));
        assert_eq!(split_endpoint("egg-1", "o"), ("o", "egg-1"));
        assert_eq!(split_endpoint(".egg", "o"), ("o", ".egg"));
    }
}
