//! Simulated provisioning and license servers, plus the content packager.
//!
//! The servers mirror the client ladder: provisioning derives from the stored
//! device key exactly as the CDM does, and licensing derives from a fresh
//! session key delivered under the device's RSA key. The servers keep no
//! nonce state; replay rejection is entirely client-side.

mod cdn;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rsa::{RsaPrivateKey, RsaPublicKey};
use thiserror::Error;

pub use cdn::{repeating_plan, CencPackage, Cdn, CdnError};

use crate::crypto::{self, AesKey, CryptoError, Iv};
use crate::kcb::{ControlBits, KeyControlBlock};
use crate::keybox::{Keybox, DEVICE_ID_LEN, PROVISIONING_TOKEN_LEN};
use crate::ladder::{self, DerivationError, DerivedKeySet};
use crate::wire::{
    ErrorMessage, KeyEntry, LicenseRequest, LicenseResponse, Message, ProvisioningRequest,
    ProvisioningResponse, RefreshRequest, RefreshResponse, WireError,
};

pub type DeviceId = [u8; DEVICE_ID_LEN];

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("unknown device")]
    UnknownDevice,
    #[error("request MAC verification failed")]
    BadClientMac,
    #[error("request signature verification failed")]
    BadSignature,
    #[error("unknown key id {}", hex::encode(.0))]
    UnknownKeyId(Vec<u8>),
    #[error("unknown license {}", hex::encode(.0))]
    UnknownLicense(Vec<u8>),
    #[error("bad request: {0}")]
    Malformed(#[from] WireError),
    #[error("unexpected {0} message")]
    UnexpectedMessage(&'static str),
    #[error("derivation failed: {0}")]
    Derivation(#[from] DerivationError),
    #[error("crypto failure: {0}")]
    Crypto(#[from] CryptoError),
    #[error("key store I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContentKeySpec {
    pub key_id: Vec<u8>,
    pub key: AesKey,
    pub control_bits: ControlBits,
    pub ttl: u32,
}

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    /// Fixed RNG seed; makes RSA keys, IVs and session keys reproducible.
    pub seed: Option<u64>,
    /// Ship a fresh server MAC key with every license.
    pub rotate_server_mac_key: bool,
    pub content_keys: Vec<ContentKeySpec>,
    pub keyboxes: Vec<Keybox>,
    /// Where issued device RSA keys are kept between runs.
    pub state_dir: Option<PathBuf>,
}

#[derive(Clone)]
struct DeviceRecord {
    device_key: AesKey,
    provisioning_token: [u8; PROVISIONING_TOKEN_LEN],
}

struct LicenseSession {
    keys: DerivedKeySet,
    key_ids: Vec<Vec<u8>>,
}

/// Server-side key material.
#[derive(Default)]
pub struct ServerKeystore {
    known_keyboxes: HashMap<DeviceId, DeviceRecord>,
    device_certs: HashMap<DeviceId, RsaPublicKey>,
    device_keys: HashMap<DeviceId, RsaPrivateKey>,
    content_keys: BTreeMap<Vec<u8>, ContentKeySpec>,
    licenses: HashMap<Vec<u8>, LicenseSession>,
}

impl ServerKeystore {
    pub fn register_keybox(&mut self, keybox: &Keybox) {
        self.known_keyboxes.insert(
            keybox.device_id,
            DeviceRecord {
                device_key: keybox.device_key,
                provisioning_token: keybox.provisioning_token,
            },
        );
    }

    pub fn add_content_key(&mut self, spec: ContentKeySpec) {
        self.content_keys.insert(spec.key_id.clone(), spec);
    }

    pub fn device_cert(&self, device_id: &DeviceId) -> Option<&RsaPublicKey> {
        self.device_certs.get(device_id)
    }

    pub fn content_key_ids(&self) -> impl Iterator<Item = &[u8]> {
        self.content_keys.keys().map(Vec::as_slice)
    }
}

struct ServerState {
    keystore: ServerKeystore,
    rng: ChaCha20Rng,
}

pub struct Server {
    state: Mutex<ServerState>,
    rotate_server_mac_key: bool,
    state_dir: Option<PathBuf>,
}

fn key_file(dir: &std::path::Path, device_id: &DeviceId) -> PathBuf {
    dir.join(format!("{}.pk8", hex::encode(device_id)))
}

impl Server {
    pub fn new(config: ServerConfig) -> Result<Server, ServerError> {
        let mut keystore = ServerKeystore::default();
        for kb in &config.keyboxes {
            keystore.register_keybox(kb);
        }
        for spec in config.content_keys {
            keystore.add_content_key(spec);
        }
        if let Some(dir) = &config.state_dir {
            if dir.is_dir() {
                for entry in std::fs::read_dir(dir)? {
                    let path = entry?.path();
                    let Some(id) = path
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .filter(|_| path.extension().is_some_and(|e| e == "pk8"))
                        .and_then(|s| hex::decode(s).ok())
                        .and_then(|v| DeviceId::try_from(v).ok())
                    else {
                        continue;
                    };
                    let key = crypto::rsa_from_pkcs8(&std::fs::read(&path)?)?;
                    keystore.device_certs.insert(id, key.to_public_key());
                    keystore.device_keys.insert(id, key);
                }
            }
        }
        let rng = match config.seed {
            Some(seed) => ChaCha20Rng::seed_from_u64(seed),
            None => ChaCha20Rng::from_entropy(),
        };
        Ok(Server {
            state: Mutex::new(ServerState { keystore, rng }),
            rotate_server_mac_key: config.rotate_server_mac_key,
            state_dir: config.state_dir,
        })
    }

    fn lock(&self) -> MutexGuard<'_, ServerState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn register_keybox(&self, keybox: &Keybox) {
        self.lock().keystore.register_keybox(keybox);
    }

    pub fn device_cert(&self, device_id: &DeviceId) -> Option<RsaPublicKey> {
        self.lock().keystore.device_cert(device_id).cloned()
    }

    /// Changes the TTL used for future licenses and refreshes of a key.
    pub fn set_key_ttl(&self, key_id: &[u8], ttl: u32) -> Result<(), ServerError> {
        let mut st = self.lock();
        let spec = st
            .keystore
            .content_keys
            .get_mut(key_id)
            .ok_or_else(|| ServerError::UnknownKeyId(key_id.to_vec()))?;
        spec.ttl = ttl;
        Ok(())
    }

    /// Server-side mirror of the CDM's provisioning derivation.
    pub fn provisioning_keys(&self, device_id: &DeviceId) -> Option<DerivedKeySet> {
        let st = self.lock();
        let rec = st.keystore.known_keyboxes.get(device_id)?;
        Some(mirror_keys(device_id, rec))
    }

    /// Decodes a request frame and answers it; failures become error frames.
    pub fn handle(&self, request: &[u8]) -> Vec<u8> {
        let result = Message::decode(request)
            .map_err(ServerError::from)
            .and_then(|msg| {
                log::info!("handling {}", msg.msg_type().name());
                match msg {
                    Message::ProvisioningRequest(r) => self.handle_provisioning_request(&r).map(Message::from),
                    Message::LicenseRequest(r) => self.handle_license_request(&r).map(Message::from),
                    Message::RefreshRequest(r) => self.handle_refresh_request(&r).map(Message::from),
                    other => Err(ServerError::UnexpectedMessage(other.msg_type().name())),
                }
            });
        match result {
            Ok(resp) => resp.encode(),
            Err(e) => {
                log::warn!("request rejected: {e}");
                Message::from(ErrorMessage { text: e.to_string() }).encode()
            }
        }
    }

    pub fn handle_provisioning_request(&self, req: &ProvisioningRequest) -> Result<ProvisioningResponse, ServerError> {
        let mut guard = self.lock();
        let ServerState { keystore, rng } = &mut *guard;
        let record = keystore
            .known_keyboxes
            .get(&req.device_id)
            .filter(|r| r.provisioning_token == req.provisioning_token)
            .ok_or(ServerError::UnknownDevice)?;
        let keys = mirror_keys(&req.device_id, record);
        let body = Message::from(req.clone()).signed_body();
        if !crypto::hmac_sha256_verify(&keys.mac_client_key, &body, &req.mac) {
            return Err(ServerError::BadClientMac);
        }

        let rsa_key = match keystore.device_keys.get(&req.device_id) {
            Some(k) => k.clone(),
            None => {
                let k = crypto::generate_rsa_key(rng)?;
                if let Some(dir) = &self.state_dir {
                    std::fs::create_dir_all(dir)?;
                    std::fs::write(key_file(dir, &req.device_id), crypto::rsa_to_pkcs8(&k)?)?;
                }
                keystore.device_keys.insert(req.device_id, k.clone());
                k
            }
        };
        keystore.device_certs.insert(req.device_id, rsa_key.to_public_key());

        let iv: Iv = crypto::random_array(rng);
        let ciphertext = crypto::cbc_encrypt(&keys.asset_key, &iv, &crypto::rsa_to_pkcs8(&rsa_key)?);
        let mut resp = ProvisioningResponse { nonce: req.nonce, iv, ciphertext, mac: [0; 32] };
        resp.mac = crypto::hmac_sha256(&keys.mac_server_key, &Message::from(resp.clone()).signed_body());
        Ok(resp)
    }

    /// Issues the requested keys. Every control block carries the request
    /// nonce with the nonce-required bit set.
    pub fn handle_license_request(&self, req: &LicenseRequest) -> Result<LicenseResponse, ServerError> {
        let mut guard = self.lock();
        let ServerState { keystore, rng } = &mut *guard;
        let cert = keystore.device_certs.get(&req.device_id).ok_or(ServerError::UnknownDevice)?;
        let body = Message::from(req.clone()).signed_body();
        if !crypto::rsa_verify(cert, req.scheme, &body, &req.signature) {
            return Err(ServerError::BadSignature);
        }
        let specs = req
            .key_ids
            .iter()
            .map(|id| {
                keystore
                    .content_keys
                    .get(id)
                    .cloned()
                    .ok_or_else(|| ServerError::UnknownKeyId(id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;

        let ctx = ladder::build_contexts(&req.device_blob)?;
        let session_key: AesKey = crypto::random_array(rng);
        let enc_session_key = crypto::rsa_oaep_encrypt(rng, cert, &session_key)?;
        let mut keys = ladder::derive_keys(&session_key, &ctx)?;

        let entries = specs
            .iter()
            .map(|spec| {
                let iv: Iv = crypto::random_array(rng);
                let kcb = KeyControlBlock::new(req.nonce, spec.ttl, spec.control_bits | ControlBits::NONCE_REQUIRED);
                KeyEntry {
                    key_id: spec.key_id.clone(),
                    iv,
                    enc_key: crypto::cbc_encrypt(&keys.asset_key, &iv, &spec.key),
                    kcb: crypto::cbc_encrypt_block(&spec.key, &iv, &kcb.to_bytes()),
                    kcb_encrypted: true,
                }
            })
            .collect();

        let mut resp = LicenseResponse {
            nonce: req.nonce,
            request_id: req.request_id.clone(),
            enc_session_key,
            keys: entries,
            new_server_mac_key: None,
            mac: [0; 32],
        };
        let mut rotated = None;
        if self.rotate_server_mac_key {
            let new_key: [u8; ladder::MAC_KEY_LEN] = crypto::random_array(rng);
            let iv: Iv = crypto::random_array(rng);
            let mut blob = iv.to_vec();
            blob.extend(crypto::cbc_encrypt(&keys.asset_key, &iv, &new_key));
            resp.new_server_mac_key = Some(blob);
            rotated = Some(new_key);
        }
        // Signed under the key the client holds now; the rotated key covers later responses.
        resp.mac = crypto::hmac_sha256(&keys.mac_server_key, &Message::from(resp.clone()).signed_body());
        if let Some(k) = rotated {
            keys.mac_server_key = k;
        }
        keystore.licenses.insert(
            req.request_id.clone(),
            LicenseSession { keys, key_ids: req.key_ids.clone() },
        );
        Ok(resp)
    }

    pub fn handle_refresh_request(&self, req: &RefreshRequest) -> Result<RefreshResponse, ServerError> {
        let mut guard = self.lock();
        let ServerState { keystore, rng } = &mut *guard;
        let license = keystore
            .licenses
            .get(&req.request_id)
            .ok_or_else(|| ServerError::UnknownLicense(req.request_id.clone()))?;
        let body = Message::from(req.clone()).signed_body();
        if !crypto::hmac_sha256_verify(&license.keys.mac_client_key, &body, &req.mac) {
            return Err(ServerError::BadClientMac);
        }
        let spec = license
            .key_ids
            .contains(&req.key_id)
            .then(|| keystore.content_keys.get(&req.key_id))
            .flatten()
            .ok_or_else(|| ServerError::UnknownKeyId(req.key_id.clone()))?;

        let iv: Iv = crypto::random_array(rng);
        let kcb = KeyControlBlock::new(req.nonce, spec.ttl, spec.control_bits | ControlBits::NONCE_REQUIRED);
        let mut resp = RefreshResponse {
            nonce: req.nonce,
            request_id: req.request_id.clone(),
            control: Some(KeyEntry {
                key_id: spec.key_id.clone(),
                iv,
                enc_key: Vec::new(),
                kcb: crypto::cbc_encrypt_block(&spec.key, &iv, &kcb.to_bytes()),
                kcb_encrypted: true,
            }),
            key_id: req.key_id.clone(),
            ttl: spec.ttl,
            mac: [0; 32],
        };
        resp.mac = crypto::hmac_sha256(&license.keys.mac_server_key, &Message::from(resp.clone()).signed_body());
        Ok(resp)
    }
}

fn mirror_keys(device_id: &DeviceId, rec: &DeviceRecord) -> DerivedKeySet {
    ladder::provisioning_keys(&Keybox::from_parts(*device_id, rec.device_key, rec.provisioning_token))
}
