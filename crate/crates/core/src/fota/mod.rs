//! Firmware images, the image store, chunk serving and update state machines.

pub mod client;
pub mod orchestrator;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use client::{FotaClient, UpdateResult, UpdateState, CHUNK_INTERVAL};
pub use orchestrator::{FotaOps, Orchestrator, Phase, PushResult, TargetProgress};

use crate::coap::{content_format, Code, CoapMessage};

pub const MAGIC: [u8; 4] = *b"EGG!";
pub const CHUNK_LEN: usize = 512;
pub const MAX_CHUNK_LEN: usize = 1024;
pub const URI_PREFIX: &str = "/fw/";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FotaError {
    #[error("bad magic number")]
    BadMagic,
    #[error("crc mismatch: header {expected:08x}, payload {actual:08x}")]
    CrcMismatch { expected: u32, actual: u32 },
    #[error("image truncated")]
    Truncated,
    #[error("empty payload")]
    EmptyPayload,
    #[error("invalid version {0:?}")]
    BadVersion(String),
    #[error("unknown image version {0}")]
    UnknownVersion(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<io::Error> for FotaError {
    fn from(e: io::Error) -> Self {
        FotaError::Io(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FirmwareImage {
    pub version: String,
    pub payload: Vec<u8>,
}

fn valid_version(v: &str) -> bool {
    let parts: Vec<&str> = v.split('.').collect();
    parts.len() == 3
        && parts
            .iter()
            .all(|p| !p.is_empty() && p.chars().all(|c| c.is_ascii_digit()))
}

impl FirmwareImage {
    /// `magic ‖ ver_len u8 ‖ version ‖ len u32 ‖ crc32 u32 ‖ payload`, big-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + self.version.len() + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(self.version.len() as u8);
        out.extend_from_slice(self.version.as_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&crc32fast::hash(&self.payload).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<FirmwareImage, FotaError> {
        if bytes.len() < 4 {
            return Err(FotaError::Truncated);
        }
        if bytes[..4] != MAGIC {
            return Err(FotaError::BadMagic);
        }
        let vlen = *bytes.get(4).ok_or(FotaError::Truncated)? as usize;
        let ver = bytes.get(5..5 + vlen).ok_or(FotaError::Truncated)?;
        let version = String::from_utf8(ver.to_vec())
            .map_err(|_| FotaError::BadVersion(String::from_utf8_lossy(ver).into_owned()))?;
        let h = 5 + vlen;
        let len_b = bytes.get(h..h + 4).ok_or(FotaError::Truncated)?;
        let crc_b = bytes.get(h + 4..h + 8).ok_or(FotaError::Truncated)?;
        let len = u32::from_be_bytes(len_b.try_into().unwrap()) as usize;
        let expected = u32::from_be_bytes(crc_b.try_into().unwrap());
        let payload = bytes.get(h + 8..).ok_or(FotaError::Truncated)?;
        if payload.len() < len {
            return Err(FotaError::Truncated);
        }
        let payload = &payload[..len];
        let actual = crc32fast::hash(payload);
        if actual != expected {
            return Err(FotaError::CrcMismatch { expected, actual });
        }
        Ok(FirmwareImage {
            version,
            payload: payload.to_vec(),
        })
    }
}

pub fn build_image(payload: &[u8], version: &str) -> Result<FirmwareImage, FotaError> {
    if payload.is_empty() {
        return Err(FotaError::EmptyPayload);
    }
    if !valid_version(version) || version.len() > 255 {
        return Err(FotaError::BadVersion(version.into()));
    }
    Ok(FirmwareImage {
        version: version.into(),
        payload: payload.to_vec(),
    })
}

/// Checks magic, length and CRC; returns the embedded version.
pub fn verify_image(bytes: &[u8]) -> Result<String, FotaError> {
    FirmwareImage::parse(bytes).map(|i| i.version)
}

pub fn image_uri(version: &str) -> String {
    format!("{URI_PREFIX}{version}")
}

/// Directory of `<version>.img` files.
#[derive(Debug, Clone)]
pub struct ImageStore {
    dir: PathBuf,
}

impl ImageStore {
    pub fn open(dir: impl AsRef<Path>) -> io::Result<Self> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(ImageStore {
            dir: dir.as_ref().to_path_buf(),
        })
    }

    fn path_of(&self, version: &str) -> Result<PathBuf, FotaError> {
        if !valid_version(version) {
            return Err(FotaError::BadVersion(version.into()));
        }
        Ok(self.dir.join(format!("{version}.img")))
    }

    /// Verifies and stores an image file; returns its version.
    pub fn put(&self, bytes: &[u8]) -> Result<String, FotaError> {
        let version = verify_image(bytes)?;
        let path = self.path_of(&version)?;
        fs::write(path, bytes)?;
        Ok(version)
    }

    /// Raw stored bytes, unverified.
    pub fn get(&self, version: &str) -> Result<Vec<u8>, FotaError> {
        let path = self.path_of(version)?;
        fs::read(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => FotaError::UnknownVersion(version.into()),
            _ => e.into(),
        })
    }

    pub fn contains(&self, version: &str) -> bool {
        self.path_of(version).is_ok_and(|p| p.exists())
    }

    pub fn versions(&self) -> Vec<String> {
        let mut v: Vec<String> = fs::read_dir(&self.dir)
            .into_iter()
            .flatten()
            .flatten()
            .filter_map(|e| {
                e.file_name()
                    .to_str()?
                    .strip_suffix(".img")
                    .map(str::to_string)
            })
            .collect();
        v.sort();
        v
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

/// Answers `GET /fw/<version>?offset=&len=` from the store.
pub fn serve_chunk(store: &ImageStore, req: &CoapMessage) -> CoapMessage {
    let path = req.path();
    let Some(version) = path.strip_prefix(URI_PREFIX) else {
        return CoapMessage::response_to(req, Code::NOT_FOUND);
    };
    let offset: Option<usize> = req.query("offset").map_or(Some(0), |v| v.parse().ok());
    let len: Option<usize> = req
        .query("len")
        .map_or(Some(CHUNK_LEN), |v| v.parse().ok());
    let (Some(offset), Some(len)) = (offset, len) else {
        return CoapMessage::response_to(req, Code::BAD_REQUEST);
    };
    let len = len.min(MAX_CHUNK_LEN);
    match store.get(version) {
        Ok(bytes) => {
            let start = offset.min(bytes.len());
            let end = (start + len).min(bytes.len());
            let mut resp =
                CoapMessage::response_to(req, Code::CONTENT).with_payload(bytes[start..end].to_vec());
            resp.set_content_format(content_format::OCTET_STREAM);
            resp
        }
        Err(_) => CoapMessage::response_to(req, Code::NOT_FOUND),
    }
}
