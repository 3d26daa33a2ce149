//! Fixtures shared by the test suites: a seeded keybox, server and CDM wired
//! together in process, with a scripted clock.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::cdm::{Cdm, CdmConfig, SessionId};
use crate::client::{Client, License};
use crate::clock::ScriptedClock;
use crate::crypto::{self, AesKey, SignatureScheme};
use crate::device::DeviceInfo;
use crate::kcb::ControlBits;
use crate::keybox::Keybox;
use crate::ladder;
use crate::server::{ContentKeySpec, Server, ServerConfig};
use crate::transport::{InProcess, Recorder};

pub fn spec(id: &str, bits: ControlBits, ttl: u32) -> ContentKeySpec {
    let key = crypto::hmac_sha256(b"fixture content key", id.as_bytes())[..16].try_into().unwrap();
    ContentKeySpec { key_id: id.as_bytes().to_vec(), key, control_bits: bits, ttl }
}

pub fn all_rights() -> ControlBits {
    ControlBits::RIGHTS.iter().fold(ControlBits::empty(), |a, b| a | *b)
}

pub struct World {
    pub clock: ScriptedClock,
    pub keybox: Keybox,
    pub server: Arc<Server>,
    pub cdm: Cdm,
    pub specs: Vec<ContentKeySpec>,
    pub device_blob: Vec<u8>,
}

pub fn world_with(specs: Vec<ContentKeySpec>, rotate: bool, seed: u64) -> World {
    let keybox = Keybox::generate(&mut ChaCha20Rng::seed_from_u64(seed)).unwrap();
    let server = Server::new(ServerConfig {
        seed: Some(seed + 1),
        rotate_server_mac_key: rotate,
        content_keys: specs.clone(),
        keyboxes: vec![keybox.clone()],
        state_dir: None,
    })
    .unwrap();
    let clock = ScriptedClock::new();
    let cdm = Cdm::new(
        CdmConfig { seed: Some(seed + 2), ..CdmConfig::default() },
        Some(keybox.clone()),
        Arc::new(clock.clone()),
    );
    World { clock, keybox, server: Arc::new(server), cdm, specs, device_blob: DeviceInfo::default().blob() }
}

pub fn world(specs: Vec<ContentKeySpec>) -> World {
    world_with(specs, false, 7)
}

impl World {
    pub fn storage_key(&self) -> AesKey {
        ladder::storage_key(&self.keybox)
    }

    pub fn client(&self) -> Client<'_, Recorder<InProcess>> {
        Client {
            cdm: &self.cdm,
            endpoint: Recorder::new(InProcess(Arc::clone(&self.server))),
            storage_key: self.storage_key(),
            device_blob: self.device_blob.clone(),
            scheme: SignatureScheme::Pss,
        }
    }

    /// Opens a session holding a freshly provisioned device key.
    pub fn provisioned(&self) -> (SessionId, Vec<u8>) {
        let sid = self.cdm.open_session().unwrap();
        let (cred, _) = self.client().ensure_credential(sid, None).unwrap();
        (sid, cred)
    }

    /// Provisioned session with every configured key loaded.
    pub fn licensed(&self) -> (SessionId, License) {
        let (sid, _) = self.provisioned();
        let ids: Vec<Vec<u8>> = self.specs.iter().map(|s| s.key_id.clone()).collect();
        let license = self.client().license(sid, &ids).unwrap();
        (sid, license)
    }
}
