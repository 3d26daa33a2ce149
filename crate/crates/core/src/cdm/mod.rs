//! Client-side content decryption module.
//!
//! A [`Cdm`] owns the installed keybox, the open sessions and their nonce
//! tables, and a trace of every call. All state sits behind one mutex, so
//! calls from several threads are applied one at a time in lock order.

mod credential;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rsa::traits::PublicKeyParts;
use rsa::{RsaPrivateKey, RsaPublicKey};
use thiserror::Error;

pub use credential::{CredentialError, DeviceRsaCredential};

use crate::clock::Clock;
use crate::crypto::{self, AesKey, CtrStream, HmacTag, Iv, SignatureScheme};
use crate::kcb::{ControlBits, KeyControlBlock};
use crate::keybox::{Keybox, KeyboxError};
use crate::ladder::{self, DerivationError, DerivedKeySet};
use crate::nonce::NonceTable;
use crate::trace::{Op, TraceRecord};
use crate::wire::{self, KeyEntry, Message, WireError};

pub const DEFAULT_MAX_SESSIONS: usize = 16;
pub const SECURITY_LEVEL: &str = "L_SIM";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SessionId(pub u32);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:08x}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum CdmError {
    #[error("too many open sessions")]
    TooManySessions,
    #[error("unknown session")]
    UnknownSession,
    #[error("nonce generation rate limited")]
    RateLimited,
    #[error("no keybox installed")]
    NoKeybox,
    #[error("keybox rejected: {0}")]
    Keybox(#[from] KeyboxError),
    #[error("session has no derived keys")]
    NoDerivedKeys,
    #[error("key derivation failed: {0}")]
    Derivation(#[from] DerivationError),
    #[error("nonce is not live")]
    StaleNonce,
    #[error("server MAC verification failed")]
    BadServerMac,
    #[error("bad padding")]
    BadPadding,
    #[error("malformed RSA key material")]
    MalformedKey,
    #[error("credential MAC verification failed")]
    BadStorageMac,
    #[error("no device RSA key loaded")]
    NoRsaKey,
    #[error("RSA-OAEP session key decryption failed")]
    OaepError,
    #[error("bad key control block magic")]
    BadKcbMagic,
    #[error("unknown key id")]
    UnknownKeyId,
    #[error("no key selected")]
    NoKeySelected,
    #[error("key expired")]
    KeyExpired,
    #[error("key usage not permitted")]
    UsageDenied,
    #[error("unsupported operation")]
    Unsupported,
    #[error("unexpected message: {0}")]
    Malformed(#[from] WireError),
    #[error("invalid argument: {0}")]
    InvalidInput(&'static str),
}

impl CdmError {
    /// Short name used in trace lines.
    pub fn kind(&self) -> &'static str {
        use CdmError::*;
        match self {
            TooManySessions => "TooManySessions",
            UnknownSession => "UnknownSession",
            RateLimited => "RateLimited",
            NoKeybox => "NoKeybox",
            Keybox(_) => "IntegrityError",
            NoDerivedKeys => "NoDerivedKeys",
            Derivation(_) => "DerivationError",
            StaleNonce => "StaleNonce",
            BadServerMac => "BadServerMac",
            BadPadding => "BadPadding",
            MalformedKey => "MalformedKey",
            BadStorageMac => "BadStorageMac",
            NoRsaKey => "NoRsaKey",
            OaepError => "OaepError",
            BadKcbMagic => "BadKcbMagic",
            UnknownKeyId => "UnknownKeyId",
            NoKeySelected => "NoKeySelected",
            KeyExpired => "KeyExpired",
            UsageDenied => "UsageDenied",
            Unsupported => "Unsupported",
            Malformed(_) => "MalformedFrame",
            InvalidInput(_) => "InvalidInput",
        }
    }
}

pub type Result<T, E = CdmError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
pub struct CdmConfig {
    pub max_sessions: usize,
    /// Fixed RNG seed for reproducible runs; `None` seeds from the OS.
    pub seed: Option<u64>,
}

impl Default for CdmConfig {
    fn default() -> Self {
        CdmConfig {
            max_sessions: DEFAULT_MAX_SESSIONS,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceQuery {
    DeviceId,
    KeyData,
    Random(usize),
    ApiVersion,
    SecurityLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UsageTableOp {
    SupportsUsageTable,
    UpdateUsageTable,
    DeactivateUsageEntry,
    ReportUsage,
    DeleteUsageEntry,
    DeleteUsageTable,
    ForceDeleteUsageEntry,
}

impl UsageTableOp {
    fn op(self) -> Op {
        match self {
            UsageTableOp::SupportsUsageTable => Op::SupportsUsageTable,
            UsageTableOp::UpdateUsageTable => Op::UpdateUsageTable,
            UsageTableOp::DeactivateUsageEntry => Op::DeactivateUsageEntry,
            UsageTableOp::ReportUsage => Op::ReportUsage,
            UsageTableOp::DeleteUsageEntry => Op::DeleteUsageEntry,
            UsageTableOp::DeleteUsageTable => Op::DeleteUsageTable,
            UsageTableOp::ForceDeleteUsageEntry => Op::ForceDeleteUsageEntry,
        }
    }
}

/// One CENC subsample: `clear` bytes copied as-is, then `protected` bytes
/// run through AES-CTR.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Subsample {
    pub clear: usize,
    pub protected: usize,
}

impl Subsample {
    pub fn new(clear: usize, protected: usize) -> Self {
        Subsample { clear, protected }
    }
}

/// Sum of all subsample lengths.
pub fn subsample_total(plan: &[Subsample]) -> usize {
    plan.iter().map(|s| s.clear + s.protected).sum()
}

/// Applies one continuous CTR keystream to the protected ranges of `data`.
/// Encryption and decryption are the same operation.
pub fn cenc_apply(key: &AesKey, iv: &Iv, plan: &[Subsample], data: &mut [u8]) {
    let mut stream = CtrStream::new(key, iv);
    let mut at = 0;
    for s in plan {
        at += s.clear;
        stream.apply(&mut data[at..at + s.protected]);
        at += s.protected;
    }
}

#[derive(Clone)]
pub struct ContentKeyEntry {
    pub key_id: Vec<u8>,
    key: AesKey,
    pub kcb: KeyControlBlock,
    pub loaded_at: Duration,
}

impl fmt::Debug for ContentKeyEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ContentKeyEntry")
            .field("key_id", &hex::encode(&self.key_id))
            .field("kcb", &self.kcb)
            .field("loaded_at", &self.loaded_at)
            .finish_non_exhaustive()
    }
}

impl ContentKeyEntry {
    fn expired(&self, now: Duration) -> bool {
        self.kcb.ttl != 0 && now > self.loaded_at + Duration::from_secs(self.kcb.ttl as u64)
    }
}

#[derive(Default)]
struct Session {
    derived: Option<DerivedKeySet>,
    keys: BTreeMap<Vec<u8>, ContentKeyEntry>,
    selected: Option<Vec<u8>>,
    rsa: Option<RsaPrivateKey>,
    nonces: NonceTable,
    device_blob: Vec<u8>,
}

impl Session {
    fn derived(&self) -> Result<&DerivedKeySet> {
        self.derived.as_ref().ok_or(CdmError::NoDerivedKeys)
    }

    fn rsa(&self) -> Result<&RsaPrivateKey> {
        self.rsa.as_ref().ok_or(CdmError::NoRsaKey)
    }

    fn selected(&self) -> Result<&ContentKeyEntry> {
        let id = self.selected.as_ref().ok_or(CdmError::NoKeySelected)?;
        Ok(&self.keys[id])
    }

    /// Verifies a server response's trailing HMAC before anything in it is
    /// parsed; a frame without a well-formed trailer is treated as unsigned.
    fn verify_server_mac(&self, response: &[u8]) -> Result<Message> {
        let derived = self.derived()?;
        let (body, tag) = wire::split_mac_trailer(response).ok_or(CdmError::BadServerMac)?;
        if !crypto::hmac_sha256_verify(&derived.mac_server_key, body, tag) {
            return Err(CdmError::BadServerMac);
        }
        Ok(Message::decode(response)?)
    }

    fn require_nonce(&self, nonce: u32) -> Result<()> {
        if self.nonces.contains(nonce) {
            Ok(())
        } else {
            Err(CdmError::StaleNonce)
        }
    }
}

struct CdmState {
    keybox: Option<Keybox>,
    sessions: BTreeMap<SessionId, Session>,
    next_session: u32,
    max_sessions: usize,
    rng: ChaCha20Rng,
    trace: Vec<TraceRecord>,
}

impl CdmState {
    fn session(&mut self, sid: SessionId) -> Result<&mut Session> {
        self.sessions.get_mut(&sid).ok_or(CdmError::UnknownSession)
    }

    fn keybox(&self) -> Result<&Keybox> {
        self.keybox.as_ref().ok_or(CdmError::NoKeybox)
    }
}

pub struct Cdm {
    state: Mutex<CdmState>,
    clock: Arc<dyn Clock>,
}

impl Cdm {
    pub fn new(config: CdmConfig, keybox: Option<Keybox>, clock: Arc<dyn Clock>) -> Cdm {
        let rng = match config.seed {
            Some(seed) => ChaCha20Rng::seed_from_u64(seed),
            None => ChaCha20Rng::from_entropy(),
        };
        let cdm = Cdm {
            state: Mutex::new(CdmState {
                keybox: None,
                sessions: BTreeMap::new(),
                next_session: 1,
                max_sessions: config.max_sessions,
                rng,
                trace: Vec::new(),
            }),
            clock,
        };
        let device_id = keybox.as_ref().map(|k| k.device_id.to_vec()).unwrap_or_default();
        cdm.traced(Op::Initialize, None, &device_id, |st| {
            st.keybox = keybox;
            Ok(())
        }, |_| Vec::new())
        .expect("initialization cannot fail");
        cdm
    }

    fn lock(&self) -> MutexGuard<'_, CdmState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn traced<T>(
        &self,
        op: Op,
        sid: Option<SessionId>,
        input: &[u8],
        f: impl FnOnce(&mut CdmState) -> Result<T>,
        out: impl FnOnce(&T) -> Vec<u8>,
    ) -> Result<T> {
        let mut st = self.lock();
        let result = f(&mut st);
        let record = match &result {
            Ok(v) => TraceRecord::new(op, sid.map(|s| s.0), None, input, &out(v)),
            Err(e) => TraceRecord::new(op, sid.map(|s| s.0), Some(e.kind().to_string()), input, &[]),
        };
        log::debug!("{record}");
        st.trace.push(record);
        result
    }

    fn now(&self) -> Duration {
        self.clock.now()
    }

    pub fn trace(&self) -> Vec<TraceRecord> {
        self.lock().trace.clone()
    }

    pub fn trace_lines(&self) -> Vec<String> {
        self.lock().trace.iter().map(ToString::to_string).collect()
    }

    pub fn terminate(&self) {
        let _ = self.traced(Op::Terminate, None, &[], |st| {
            st.sessions.clear();
            Ok(())
        }, |_| Vec::new());
    }

    // --- keybox ---------------------------------------------------------

    pub fn install_keybox(&self, wrapped: &[u8], transport_key: &AesKey) -> Result<()> {
        self.traced(Op::InstallKeybox, None, wrapped, |st| {
            st.keybox = Some(Keybox::install(wrapped, transport_key)?);
            Ok(())
        }, |_| Vec::new())
    }

    pub fn wrap_keybox(&self, keybox: &Keybox, transport_key: &AesKey) -> Result<Vec<u8>> {
        self.traced(Op::WrapKeybox, None, &keybox.device_id, |st| {
            if !keybox.is_valid() {
                return Err(KeyboxError::Integrity(keybox.validate()).into());
            }
            Ok(keybox.wrap(transport_key, &mut st.rng))
        }, Clone::clone)
    }

    pub fn is_keybox_valid(&self) -> Result<()> {
        self.traced(Op::IsKeyboxValid, None, &[], |st| {
            let kb = st.keybox()?;
            match kb.validate() {
                crate::keybox::Verdict::Ok => Ok(()),
                v => Err(KeyboxError::Integrity(v).into()),
            }
        }, |_| Vec::new())
    }

    pub fn query_device_info(&self, query: DeviceQuery) -> Result<Vec<u8>> {
        let (op, input) = match query {
            DeviceQuery::DeviceId => (Op::GetDeviceId, Vec::new()),
            DeviceQuery::KeyData => (Op::GetKeyData, Vec::new()),
            DeviceQuery::Random(n) => (Op::GetRandom, (n as u32).to_be_bytes().to_vec()),
            DeviceQuery::ApiVersion => (Op::ApiVersion, Vec::new()),
            DeviceQuery::SecurityLevel => (Op::GetSecurityLevel, Vec::new()),
        };
        self.traced(op, None, &input, |st| match query {
            DeviceQuery::DeviceId => Ok(st.keybox()?.device_id.to_vec()),
            DeviceQuery::KeyData => Ok(st.keybox()?.provisioning_token.to_vec()),
            DeviceQuery::Random(n) => {
                let mut out = vec![0u8; n];
                st.rng.fill_bytes(&mut out);
                Ok(out)
            }
            DeviceQuery::ApiVersion => Ok(crate::API_VERSION.as_bytes().to_vec()),
            DeviceQuery::SecurityLevel => Ok(SECURITY_LEVEL.as_bytes().to_vec()),
        }, Clone::clone)
    }

    // --- sessions -------------------------------------------------------

    pub fn open_session(&self) -> Result<SessionId> {
        let mut st = self.lock();
        let result = if st.sessions.len() >= st.max_sessions {
            Err(CdmError::TooManySessions)
        } else {
            let sid = SessionId(st.next_session);
            st.next_session += 1;
            st.sessions.insert(sid, Session::default());
            Ok(sid)
        };
        let record = match &result {
            Ok(sid) => TraceRecord::new(Op::OpenSession, Some(sid.0), None, &[], &sid.0.to_be_bytes()),
            Err(e) => TraceRecord::new(Op::OpenSession, None, Some(e.kind().to_string()), &[], &[]),
        };
        log::debug!("{record}");
        st.trace.push(record);
        result
    }

    /// Drops the session together with all of its key material.
    pub fn close_session(&self, sid: SessionId) -> Result<()> {
        self.traced(Op::CloseSession, Some(sid), &[], |st| {
            st.sessions.remove(&sid).map(|_| ()).ok_or(CdmError::UnknownSession)
        }, |_| Vec::new())
    }

    pub fn max_sessions(&self) -> usize {
        self.traced(Op::GetMaxNumberOfSessions, None, &[], |st| Ok(st.max_sessions), |n| {
            (*n as u32).to_be_bytes().to_vec()
        })
        .unwrap()
    }

    pub fn open_session_count(&self) -> usize {
        self.traced(Op::GetNumberOfOpenSessions, None, &[], |st| Ok(st.sessions.len()), |n| {
            (*n as u32).to_be_bytes().to_vec()
        })
        .unwrap()
    }

    pub fn generate_nonce(&self, sid: SessionId) -> Result<u32> {
        let now = self.now();
        self.traced(Op::GenerateNonce, Some(sid), &[], |st| {
            let CdmState { sessions, rng, .. } = st;
            let session = sessions.get_mut(&sid).ok_or(CdmError::UnknownSession)?;
            session.nonces.generate(rng, now).map_err(|_| CdmError::RateLimited)
        }, |n| n.to_be_bytes().to_vec())
    }

    // --- provisioning phase --------------------------------------------

    /// Derives the provisioning key set from the installed keybox.
    pub fn generate_derived_keys(&self, sid: SessionId) -> Result<()> {
        let blob = {
            let st = self.lock();
            st.keybox.as_ref().map(ladder::provisioning_blob).unwrap_or_default()
        };
        self.traced(Op::GenerateDerivedKeys, Some(sid), &blob, |st| {
            let keys = ladder::provisioning_keys(st.keybox()?);
            let session = st.session(sid)?;
            session.derived = Some(keys);
            session.device_blob = blob.clone();
            Ok(())
        }, |_| Vec::new())
    }

    /// HMAC-SHA256 under the session's client MAC key.
    pub fn generate_signature(&self, sid: SessionId, message: &[u8]) -> Result<HmacTag> {
        self.traced(Op::GenerateSignature, Some(sid), message, |st| {
            let keys = st.session(sid)?.derived()?;
            Ok(crypto::hmac_sha256(&keys.mac_client_key, message))
        }, |t| t.to_vec())
    }

    /// Verifies a provisioning response, checks the recovered RSA key, and
    /// re-encrypts it under `storage_key`. Returns the persisted form.
    pub fn rewrap_device_rsa_key(
        &self,
        sid: SessionId,
        response: &[u8],
        storage_key: &AesKey,
    ) -> Result<Vec<u8>> {
        self.traced(Op::RewrapDeviceRsaKey, Some(sid), response, |st| {
            let CdmState { sessions, rng, .. } = st;
            let session = sessions.get_mut(&sid).ok_or(CdmError::UnknownSession)?;
            let Message::ProvisioningResponse(resp) = session.verify_server_mac(response)? else {
                return Err(CdmError::InvalidInput("expected a provisioning response"));
            };
            session.require_nonce(resp.nonce)?;
            let asset_key = session.derived()?.asset_key;
            let der = crypto::cbc_decrypt(&asset_key, &resp.iv, &resp.ciphertext)
                .map_err(|_| CdmError::BadPadding)?;
            crypto::rsa_from_pkcs8(&der).map_err(|_| CdmError::MalformedKey)?;
            session.nonces.consume(resp.nonce);
            Ok(DeviceRsaCredential::seal(&der, storage_key, rng).to_bytes())
        }, Clone::clone)
    }

    pub fn load_device_rsa_key(&self, sid: SessionId, wrapped: &[u8], storage_key: &AesKey) -> Result<()> {
        self.traced(Op::LoadDeviceRsaKey, Some(sid), wrapped, |st| {
            let session = st.session(sid)?;
            let cred = DeviceRsaCredential::from_bytes(wrapped).map_err(|_| CdmError::MalformedKey)?;
            let key = cred.open(storage_key).map_err(|e| match e {
                CredentialError::BadMac => CdmError::BadStorageMac,
                CredentialError::Malformed => CdmError::MalformedKey,
            })?;
            session.rsa = Some(key);
            Ok(())
        }, |_| Vec::new())
    }

    /// Public half of the loaded device key.
    pub fn rsa_public_key(&self, sid: SessionId) -> Result<RsaPublicKey> {
        let mut st = self.lock();
        Ok(st.session(sid)?.rsa()?.to_public_key())
    }

    // --- license phase --------------------------------------------------

    pub fn generate_rsa_signature(
        &self,
        sid: SessionId,
        message: &[u8],
        scheme: SignatureScheme,
    ) -> Result<Vec<u8>> {
        self.traced(Op::GenerateRsaSignature, Some(sid), message, |st| {
            let CdmState { sessions, rng, .. } = st;
            let session = sessions.get_mut(&sid).ok_or(CdmError::UnknownSession)?;
            let key = session.rsa()?;
            debug_assert_eq!(key.size(), crypto::RSA_MODULUS_LEN);
            Ok(crypto::rsa_sign(rng, key, scheme, message))
        }, Clone::clone)
    }

    /// Unwraps the session key with RSA-OAEP and replaces the session's
    /// derived keys with ones rooted at it.
    pub fn derive_keys_from_session_key(
        &self,
        sid: SessionId,
        enc_session_key: &[u8],
        device_blob: &[u8],
    ) -> Result<()> {
        self.traced(Op::DeriveKeysFromSessionKey, Some(sid), enc_session_key, |st| {
            let session = st.session(sid)?;
            let session_key = crypto::rsa_oaep_decrypt(session.rsa()?, enc_session_key)
                .map_err(|_| CdmError::OaepError)?;
            let keys = ladder::derive_keys(&session_key, &ladder::build_contexts(device_blob)?)?;
            session.derived = Some(keys);
            session.device_blob = device_blob.to_vec();
            Ok(())
        }, |_| Vec::new())
    }

    /// Loads every key in a license response, or none of them.
    pub fn load_keys(&self, sid: SessionId, response: &[u8]) -> Result<usize> {
        let now = self.now();
        self.traced(Op::LoadKeys, Some(sid), response, |st| {
            let session = st.session(sid)?;
            let Message::LicenseResponse(resp) = session.verify_server_mac(response)? else {
                return Err(CdmError::InvalidInput("expected a license response"));
            };
            session.require_nonce(resp.nonce)?;
            let asset_key = session.derived()?.asset_key;

            let mut staged = Vec::with_capacity(resp.keys.len());
            let mut used_nonces = vec![resp.nonce];
            for entry in &resp.keys {
                let key = decrypt_content_key(&asset_key, entry)?;
                let kcb = open_kcb(&key, entry)?;
                if kcb.control_bits.contains(ControlBits::NONCE_REQUIRED) {
                    session.require_nonce(kcb.nonce)?;
                    used_nonces.push(kcb.nonce);
                }
                if kcb.control_bits.contains(ControlBits::ANTI_ROLLBACK_REQUIRED) {
                    log::warn!("anti-rollback requested for key {} (not enforced)", hex::encode(&entry.key_id));
                }
                staged.push(ContentKeyEntry {
                    key_id: entry.key_id.clone(),
                    key,
                    kcb,
                    loaded_at: now,
                });
            }
            let new_mac_key = match &resp.new_server_mac_key {
                Some(blob) => Some(decrypt_mac_key(&asset_key, blob)?),
                None => None,
            };

            // Everything checked; commit.
            used_nonces.sort_unstable();
            used_nonces.dedup();
            for n in used_nonces {
                session.nonces.consume(n);
            }
            let count = staged.len();
            for e in staged {
                session.keys.insert(e.key_id.clone(), e);
            }
            if let Some(k) = new_mac_key {
                session.derived.as_mut().unwrap().mac_server_key = k;
            }
            Ok(count)
        }, |n| (*n as u32).to_be_bytes().to_vec())
    }

    /// Applies a refresh: only the TTL (and its start time) changes.
    pub fn refresh_keys(&self, sid: SessionId, response: &[u8]) -> Result<()> {
        let now = self.now();
        self.traced(Op::RefreshKeys, Some(sid), response, |st| {
            let session = st.session(sid)?;
            let Message::RefreshResponse(resp) = session.verify_server_mac(response)? else {
                return Err(CdmError::InvalidInput("expected a refresh response"));
            };
            session.require_nonce(resp.nonce)?;
            let entry = session.keys.get(&resp.key_id).ok_or(CdmError::UnknownKeyId)?;
            if let Some(control) = &resp.control {
                let offered = open_kcb(&entry.key, control)?;
                if offered.control_bits != entry.kcb.control_bits {
                    log::info!("refresh tried to change control bits; keeping {:?}", entry.kcb.control_bits);
                }
            }
            session.nonces.consume(resp.nonce);
            let entry = session.keys.get_mut(&resp.key_id).unwrap();
            entry.kcb.ttl = resp.ttl;
            entry.loaded_at = now;
            Ok(())
        }, |_| Vec::new())
    }

    pub fn select_key(&self, sid: SessionId, key_id: &[u8]) -> Result<()> {
        self.traced(Op::SelectKey, Some(sid), key_id, |st| {
            let session = st.session(sid)?;
            if !session.keys.contains_key(key_id) {
                return Err(CdmError::UnknownKeyId);
            }
            session.selected = Some(key_id.to_vec());
            Ok(())
        }, |_| Vec::new())
    }

    pub fn query_key_control(&self, sid: SessionId, key_id: &[u8]) -> Result<KeyControlBlock> {
        self.traced(Op::QueryKeyControl, Some(sid), key_id, |st| {
            let session = st.session(sid)?;
            session.keys.get(key_id).map(|e| e.kcb).ok_or(CdmError::UnknownKeyId)
        }, |k| k.to_bytes().to_vec())
    }

    // --- content decryption --------------------------------------------

    fn usable_key(session: &Session, right: ControlBits, now: Duration) -> Result<AesKey> {
        let entry = session.selected()?;
        if entry.expired(now) {
            return Err(CdmError::KeyExpired);
        }
        if !entry.kcb.allows(right) {
            return Err(CdmError::UsageDenied);
        }
        Ok(entry.key)
    }

    pub fn decrypt_cenc(&self, sid: SessionId, data: &[u8], subsamples: &[Subsample], iv: &Iv) -> Result<Vec<u8>> {
        let now = self.now();
        let mut input = iv.to_vec();
        input.extend_from_slice(&data[..data.len().min(crate::trace::HEX_PREFIX_BYTES)]);
        self.traced(Op::DecryptCenc, Some(sid), &input, |st| {
            let session = st.session(sid)?;
            let key = Self::usable_key(session, ControlBits::ALLOW_CONTENT_DECRYPT, now)?;
            if subsample_total(subsamples) != data.len() {
                return Err(CdmError::InvalidInput("subsample lengths do not cover the buffer"));
            }
            let mut out = data.to_vec();
            cenc_apply(&key, iv, subsamples, &mut out);
            Ok(out)
        }, Clone::clone)
    }

    pub fn generic_encrypt(&self, sid: SessionId, data: &[u8], iv: &Iv) -> Result<Vec<u8>> {
        let now = self.now();
        self.traced(Op::GenericEncrypt, Some(sid), data, |st| {
            let key = Self::usable_key(st.session(sid)?, ControlBits::ALLOW_GENERIC_ENCRYPT, now)?;
            Ok(crypto::cbc_encrypt(&key, iv, data))
        }, Clone::clone)
    }

    pub fn generic_decrypt(&self, sid: SessionId, data: &[u8], iv: &Iv) -> Result<Vec<u8>> {
        let now = self.now();
        self.traced(Op::GenericDecrypt, Some(sid), data, |st| {
            let key = Self::usable_key(st.session(sid)?, ControlBits::ALLOW_GENERIC_DECRYPT, now)?;
            crypto::cbc_decrypt(&key, iv, data).map_err(|_| CdmError::BadPadding)
        }, Clone::clone)
    }

    pub fn generic_sign(&self, sid: SessionId, data: &[u8]) -> Result<HmacTag> {
        let now = self.now();
        self.traced(Op::GenericSign, Some(sid), data, |st| {
            let key = Self::usable_key(st.session(sid)?, ControlBits::ALLOW_GENERIC_SIGN, now)?;
            Ok(crypto::hmac_sha256(&key, data))
        }, |t| t.to_vec())
    }

    pub fn generic_verify(&self, sid: SessionId, data: &[u8], tag: &[u8]) -> Result<bool> {
        let now = self.now();
        self.traced(Op::GenericVerify, Some(sid), data, |st| {
            let key = Self::usable_key(st.session(sid)?, ControlBits::ALLOW_GENERIC_VERIFY, now)?;
            Ok(crypto::hmac_sha256_verify(&key, data, tag))
        }, |ok| vec![*ok as u8])
    }

    pub fn usage_table(&self, op: UsageTableOp) -> Result<()> {
        self.traced(op.op(), None, &[], |_| Err(CdmError::Unsupported), |_| Vec::new())
    }

    /// Exposes a session's derived key set for cross-checking against the
    /// server side.
    #[cfg(any(test, feature = "testkit"))]
    pub fn derived_keys(&self, sid: SessionId) -> Option<DerivedKeySet> {
        self.lock().sessions.get(&sid)?.derived.clone()
    }

    /// Modulus of the session's device key, for matching against a server record.
    pub fn rsa_modulus(&self, sid: SessionId) -> Result<Vec<u8>> {
        Ok(self.rsa_public_key(sid)?.n().to_bytes_be())
    }
}

fn decrypt_content_key(asset_key: &AesKey, entry: &KeyEntry) -> Result<AesKey> {
    let key = crypto::cbc_decrypt(asset_key, &entry.iv, &entry.enc_key).map_err(|_| CdmError::BadPadding)?;
    crypto::aes_key(&key).map_err(|_| CdmError::MalformedKey)
}

fn open_kcb(content_key: &AesKey, entry: &KeyEntry) -> Result<KeyControlBlock> {
    let raw = if entry.kcb_encrypted {
        crypto::cbc_decrypt_block(content_key, &entry.iv, &entry.kcb)
    } else {
        entry.kcb
    };
    let kcb = KeyControlBlock::from_bytes(&raw).expect("16 bytes");
    kcb.verify_magic().map_err(|_| CdmError::BadKcbMagic)?;
    Ok(kcb)
}

fn decrypt_mac_key(asset_key: &AesKey, blob: &[u8]) -> Result<[u8; ladder::MAC_KEY_LEN]> {
    if blob.len() < 16 {
        return Err(CdmError::BadPadding);
    }
    let (iv, ct) = blob.split_at(16);
    let key = crypto::cbc_decrypt(asset_key, iv.try_into().unwrap(), ct).map_err(|_| CdmError::BadPadding)?;
    key.try_into().map_err(|_| CdmError::MalformedKey)
}

#[cfg(test)]
mod tests;
