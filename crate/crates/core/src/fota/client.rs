use std::time::Duration;

use serde::Serialize;

use super::{FirmwareImage, FotaError, CHUNK_LEN, URI_PREFIX};
use crate::clock::Timestamp;
use crate::coap::{Code, CoapMessage, MessageType};
use crate::lwm2m::model::{ObjectModel, Operations, ResourceValue};
use crate::lwm2m::{LwPath, FW_PACKAGE_URI, FW_RESULT, FW_STATE, FW_UPDATE, OBJ_FIRMWARE};

/// Pause between chunk fetches (flash write time).
pub const CHUNK_INTERVAL: Duration = Duration::from_millis(100);
const MAX_IMAGE: usize = 16 * 1024 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UpdateState {
    Idle = 0,
    Downloading = 1,
    Downloaded = 2,
    Updating = 3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UpdateResult {
    None = 0,
    Success = 1,
    ConnectionLost = 4,
    IntegrityFailure = 5,
}

impl UpdateState {
    pub fn from_code(c: i64) -> Option<Self> {
        Some(match c {
            0 => UpdateState::Idle,
            1 => UpdateState::Downloading,
            2 => UpdateState::Downloaded,
            3 => UpdateState::Updating,
            _ => return None,
        })
    }
}

impl UpdateResult {
    pub fn from_code(c: i64) -> Option<Self> {
        Some(match c {
            0 => UpdateResult::None,
            1 => UpdateResult::Success,
            4 => UpdateResult::ConnectionLost,
            5 => UpdateResult::IntegrityFailure,
            _ => return None,
        })
    }
}

/// Device side of an update: fetches the image in chunks, stages it, and
/// lets the boot loader verify it again on reboot.
#[derive(Debug, Clone)]
pub struct FotaClient {
    state: UpdateState,
    result: UpdateResult,
    target: Option<String>,
    buf: Vec<u8>,
    in_flight: bool,
    next_fetch: Option<Timestamp>,
}

impl Default for FotaClient {
    fn default() -> Self {
        FotaClient {
            state: UpdateState::Idle,
            result: UpdateResult::None,
            target: None,
            buf: Vec::new(),
            in_flight: false,
            next_fetch: None,
        }
    }
}

impl FotaClient {
    pub fn new() -> Self {
        FotaClient::default()
    }

    /// Adds the firmware object resources to a device model.
    pub fn define(model: &mut ObjectModel) {
        let p = |r| LwPath::resource(OBJ_FIRMWARE, 0, r);
        model.define(p(FW_PACKAGE_URI), Operations::RW, Some(ResourceValue::Str(String::new())));
        model.define(p(FW_UPDATE), Operations::E, None);
        model.define(p(FW_STATE), Operations::R, Some(ResourceValue::Int(0)));
        model.define(p(FW_RESULT), Operations::R, Some(ResourceValue::Int(0)));
    }

    /// Mirrors state and result into the model.
    pub fn sync(&self, model: &mut ObjectModel) {
        let p = |r| LwPath::resource(OBJ_FIRMWARE, 0, r);
        let _ = model.set(p(FW_STATE), ResourceValue::Int(self.state as i64));
        let _ = model.set(p(FW_RESULT), ResourceValue::Int(self.result as i64));
    }

    pub fn state(&self) -> UpdateState {
        self.state
    }

    pub fn result(&self) -> UpdateResult {
        self.result
    }

    pub fn target_version(&self) -> Option<&str> {
        self.target.as_deref()
    }

    pub fn downloaded_bytes(&self) -> usize {
        self.buf.len()
    }

    /// Package URI written by the server. An empty URI cancels.
    pub fn on_uri(&mut self, uri: &str, now: Timestamp) -> Result<(), FotaError> {
        let uri = uri.trim();
        if uri.is_empty() {
            if self.state != UpdateState::Updating {
                *self = FotaClient::default();
            }
            return Ok(());
        }
        let version = uri
            .strip_prefix(URI_PREFIX)
            .filter(|v| !v.is_empty() && !v.contains('/'))
            .ok_or_else(|| FotaError::BadVersion(uri.to_string()))?;
        if matches!(self.state, UpdateState::Downloading | UpdateState::Updating) {
            return Ok(());
        }
        self.state = UpdateState::Downloading;
        self.result = UpdateResult::None;
        self.target = Some(version.to_string());
        self.buf.clear();
        self.in_flight = false;
        self.next_fetch = Some(now);
        Ok(())
    }

    pub fn poll_timeout(&self) -> Option<Timestamp> {
        if self.state == UpdateState::Downloading && !self.in_flight {
            self.next_fetch
        } else {
            None
        }
    }

    /// The next chunk request, if one is due.
    pub fn fetch_request(&mut self, now: Timestamp) -> Option<CoapMessage> {
        if self.poll_timeout()? > now {
            return None;
        }
        let version = self.target.as_ref()?;
        let mut req = CoapMessage::request(
            MessageType::Con,
            Code::GET,
            &format!("{URI_PREFIX}{version}"),
        );
        req.add_query("offset", self.buf.len());
        req.add_query("len", CHUNK_LEN);
        self.in_flight = true;
        Some(req)
    }

    pub fn on_chunk(&mut self, resp: &CoapMessage, now: Timestamp) {
        if self.state != UpdateState::Downloading {
            return;
        }
        self.in_flight = false;
        if !resp.code.is_success() {
            self.fail(UpdateResult::ConnectionLost);
            return;
        }
        self.buf.extend_from_slice(&resp.payload);
        if self.buf.len() > MAX_IMAGE {
            self.fail(UpdateResult::IntegrityFailure);
            return;
        }
        if resp.payload.len() < CHUNK_LEN {
            match FirmwareImage::parse(&self.buf) {
                Ok(img) if Some(&img.version) == self.target.as_ref() => {
                    self.state = UpdateState::Downloaded;
                    self.next_fetch = None;
                }
                _ => self.fail(UpdateResult::IntegrityFailure),
            }
        } else {
            self.next_fetch = Some(now + CHUNK_INTERVAL);
        }
    }

    pub fn on_fetch_failed(&mut self) {
        if self.state == UpdateState::Downloading {
            self.in_flight = false;
            self.fail(UpdateResult::ConnectionLost);
        }
    }

    fn fail(&mut self, result: UpdateResult) {
        self.state = UpdateState::Idle;
        self.result = result;
        self.buf.clear();
        self.next_fetch = None;
    }

    /// Update executed. Returns true when a staged image exists and the
    /// device should reboot into the boot loader.
    pub fn begin_update(&mut self) -> bool {
        if self.state != UpdateState::Downloaded {
            return false;
        }
        self.state = UpdateState::Updating;
        true
    }

    /// Boot loader: re-verifies the staged image. Returns the version to run
    /// when it is valid.
    pub fn boot(&mut self) -> Option<String> {
        if self.state != UpdateState::Updating {
            return None;
        }
        let out = match FirmwareImage::parse(&self.buf) {
            Ok(img) => {
                self.state = UpdateState::Idle;
                self.result = UpdateResult::Success;
                Some(img.version)
            }
            Err(_) => {
                self.fail(UpdateResult::IntegrityFailure);
                None
            }
        };
        self.buf.clear();
        self.target = None;
        out
    }

    /// Power loss. Staged images survive, partial downloads do not.
    pub fn crash(&mut self) -> Option<String> {
        match self.state {
            UpdateState::Downloading | UpdateState::Downloaded => {
                self.fail(UpdateResult::ConnectionLost);
                self.target = None;
                None
            }
            UpdateState::Updating => self.boot(),
            UpdateState::Idle => None,
        }
    }

    /// Lets a test or fault plan corrupt the staged bytes.
    pub fn corrupt_staged(&mut self, index: usize) {
        if let Some(b) = self.buf.get_mut(index) {
            *b ^= 0x01;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fota::build_image;

    fn download(c: &mut FotaClient, image: &[u8]) -> Timestamp {
        let mut now = Timestamp(0);
        while let Some(t) = c.poll_timeout() {
            now = now.max(t);
            let req = c.fetch_request(now).unwrap();
            let off: usize = req.query("offset").unwrap().parse().unwrap();
            let end = (off + CHUNK_LEN).min(image.len());
            let resp = CoapMessage::response_to(&req, Code::CONTENT).with_payload(image[off..end].to_vec());
            c.on_chunk(&resp, now);
        }
        now
    }

    #[test]
    fn happy_path() {
        let image = build_image(&[1u8; 2000], "1.1.0").unwrap().to_bytes();
        let mut c = FotaClient::new();
        c.on_uri("/fw/1.1.0", Timestamp(0)).unwrap();
        assert_eq!(c.state(), UpdateState::Downloading);
        let done = download(&mut c, &image);
        // 2027 bytes → 4 chunks at 100 ms pacing
        assert_eq!(done, Timestamp(300));
        assert_eq!(c.state(), UpdateState::Downloaded);
        assert!(c.begin_update());
        assert_eq!(c.boot().as_deref(), Some("1.1.0"));
        assert_eq!((c.state(), c.result()), (UpdateState::Idle, UpdateResult::Success));
    }

    #[test]
    fn corrupt_image_is_integrity_failure() {
        let mut image = build_image(&[1u8; 2000], "1.1.0").unwrap().to_bytes();
        image[1500] ^= 0x80;
        let mut c = FotaClient::new();
        c.on_uri("/fw/1.1.0", Timestamp(0)).unwrap();
        download(&mut c, &image);
        assert_eq!((c.state(), c.result()), (UpdateState::Idle, UpdateResult::IntegrityFailure));
        assert!(!c.begin_update());
    }

    #[test]
    fn version_mismatch_is_integrity_failure() {
        let image = build_image(&[1u8; 100], "9.9.9").unwrap().to_bytes();
        let mut c = FotaClient::new();
        c.on_uri("/fw/1.1.0", Timestamp(0)).unwrap();
        download(&mut c, &image);
        assert_eq!(c.result(), UpdateResult::IntegrityFailure);
    }

    #[test]
    fn crash_mid_download_loses_partial() {
        let mut c = FotaClient::new();
        c.on_uri("/fw/1.1.0", Timestamp(0)).unwrap();
        let req = c.fetch_request(Timestamp(0)).unwrap();
        let resp = CoapMessage::response_to(&req, Code::CONTENT).with_payload(vec![0u8; CHUNK_LEN]);
        c.on_chunk(&resp, Timestamp(0));
        assert_eq!(c.crash(), None);
        assert_eq!((c.state(), c.result()), (UpdateState::Idle, UpdateResult::ConnectionLost));
        assert_eq!(c.downloaded_bytes(), 0);
    }

    #[test]
    fn boot_loader_rejects_corrupted_staging() {
        let image = build_image(&[3u8; 700], "1.1.0").unwrap().to_bytes();
        let mut c = FotaClient::new();
        c.on_uri("/fw/1.1.0", Timestamp(0)).unwrap();
        download(&mut c, &image);
        c.corrupt_staged(0);
        assert!(c.begin_update());
        assert_eq!(c.boot(), None);
        assert_eq!(c.result(), UpdateResult::IntegrityFailure);
    }

    #[test]
    fn model_mirrors_state() {
        let mut m = ObjectModel::new();
        FotaClient::define(&mut m);
        let mut c = FotaClient::new();
        c.on_uri("/fw/1.0.1", Timestamp(0)).unwrap();
        c.sync(&mut m);
        assert_eq!(
            m.get(LwPath::resource(OBJ_FIRMWARE, 0, FW_STATE)),
            Some(&ResourceValue::Int(1))
        );
    }
}
