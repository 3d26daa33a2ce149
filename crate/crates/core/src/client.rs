//! Client-side protocol driver: builds requests around CDM calls, talks to an
//! [`Endpoint`], and feeds the responses back into the CDM.

use std::fmt;
use std::io;

use thiserror::Error;

use crate::cdm::{Cdm, CdmError, DeviceQuery, SessionId, Subsample};
use crate::crypto::{AesKey, Iv, SignatureScheme};
use crate::server::CencPackage;
use crate::transport::Endpoint;
use crate::wire::{LicenseRequest, Message, ProvisioningRequest, RefreshRequest, WireError};

pub const REQUEST_ID_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Provisioning,
    License,
    Refresh,
    Decryption,
    Generic,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Provisioning => "provisioning",
            Phase::License => "license",
            Phase::Refresh => "refresh",
            Phase::Decryption => "decryption",
            Phase::Generic => "generic crypto",
        })
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("{phase}: {source}")]
    Cdm { phase: Phase, source: CdmError },
    #[error("{phase}: server refused: {text}")]
    Server { phase: Phase, text: String },
    #[error("{phase}: bad server reply: {source}")]
    Wire { phase: Phase, source: WireError },
    #[error("{phase}: unexpected {got} reply")]
    Unexpected { phase: Phase, got: &'static str },
    #[error("{phase}: transport: {source}")]
    Transport { phase: Phase, source: io::Error },
}

impl ClientError {
    pub fn phase(&self) -> Phase {
        match self {
            ClientError::Cdm { phase, .. }
            | ClientError::Server { phase, .. }
            | ClientError::Wire { phase, .. }
            | ClientError::Unexpected { phase, .. }
            | ClientError::Transport { phase, .. } => *phase,
        }
    }

    pub fn cdm_error(&self) -> Option<&CdmError> {
        match self {
            ClientError::Cdm { source, .. } => Some(source),
            _ => None,
        }
    }
}

type Result<T> = std::result::Result<T, ClientError>;

trait InPhase<T> {
    fn in_phase(self, phase: Phase) -> Result<T>;
}

impl<T> InPhase<T> for std::result::Result<T, CdmError> {
    fn in_phase(self, phase: Phase) -> Result<T> {
        self.map_err(|source| ClientError::Cdm { phase, source })
    }
}

/// A granted license, as the client remembers it for refreshes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct License {
    pub request_id: Vec<u8>,
    pub keys_loaded: usize,
}

pub struct Client<'a, E> {
    pub cdm: &'a Cdm,
    pub endpoint: E,
    pub storage_key: AesKey,
    pub device_blob: Vec<u8>,
    pub scheme: SignatureScheme,
}

impl<'a, E: Endpoint> Client<'a, E> {
    fn send(&mut self, phase: Phase, request: &Message) -> Result<Vec<u8>> {
        let raw = self
            .endpoint
            .exchange(&request.encode())
            .map_err(|source| ClientError::Transport { phase, source })?;
        // Error frames carry no MAC; surface them before the CDM sees the bytes.
        if let Ok(Message::Error(e)) = Message::decode(&raw) {
            return Err(ClientError::Server { phase, text: e.text });
        }
        Ok(raw)
    }

    fn request_id(&self, phase: Phase) -> Result<Vec<u8>> {
        self.cdm.query_device_info(DeviceQuery::Random(REQUEST_ID_LEN)).in_phase(phase)
    }

    fn device_id(&self, phase: Phase) -> Result<[u8; 32]> {
        let id = self.cdm.query_device_info(DeviceQuery::DeviceId).in_phase(phase)?;
        Ok(id.try_into().expect("device id is 32 bytes"))
    }

    /// Runs certificate provisioning and returns the persisted credential bytes.
    pub fn provision(&mut self, sid: SessionId) -> Result<Vec<u8>> {
        let phase = Phase::Provisioning;
        let nonce = self.cdm.generate_nonce(sid).in_phase(phase)?;
        self.cdm.generate_derived_keys(sid).in_phase(phase)?;
        let token = self.cdm.query_device_info(DeviceQuery::KeyData).in_phase(phase)?;
        let mut req = ProvisioningRequest {
            nonce,
            device_id: self.device_id(phase)?,
            provisioning_token: token.try_into().expect("token is 72 bytes"),
            request_id: self.request_id(phase)?,
            mac: [0; 32],
        };
        req.mac = self
            .cdm
            .generate_signature(sid, &Message::from(req.clone()).signed_body())
            .in_phase(phase)?;
        let response = self.send(phase, &req.into())?;
        self.cdm
            .rewrap_device_rsa_key(sid, &response, &self.storage_key)
            .in_phase(phase)
    }

    pub fn load_credential(&mut self, sid: SessionId, wrapped: &[u8]) -> Result<()> {
        self.cdm
            .load_device_rsa_key(sid, wrapped, &self.storage_key)
            .in_phase(Phase::Provisioning)
    }

    /// Loads `stored` if it opens under the storage key; otherwise provisions
    /// afresh. Returns the credential now in use and whether it is new.
    pub fn ensure_credential(&mut self, sid: SessionId, stored: Option<&[u8]>) -> Result<(Vec<u8>, bool)> {
        if let Some(stored) = stored {
            match self.load_credential(sid, stored) {
                Ok(()) => return Ok((stored.to_vec(), false)),
                Err(e) => log::warn!("stored credential unusable ({e}); provisioning again"),
            }
        }
        let fresh = self.provision(sid)?;
        self.load_credential(sid, &fresh)?;
        Ok((fresh, true))
    }

    /// Requests `key_ids`, derives the license keys and loads the response.
    pub fn license(&mut self, sid: SessionId, key_ids: &[Vec<u8>]) -> Result<License> {
        let raw = self.request_license(sid, key_ids)?;
        self.accept_license(sid, &raw)
    }

    /// First half of [`Client::license`]: returns the raw license response.
    pub fn request_license(&mut self, sid: SessionId, key_ids: &[Vec<u8>]) -> Result<Vec<u8>> {
        let phase = Phase::License;
        let nonce = self.cdm.generate_nonce(sid).in_phase(phase)?;
        let mut req = LicenseRequest {
            nonce,
            device_id: self.device_id(phase)?,
            device_blob: self.device_blob.clone(),
            request_id: self.request_id(phase)?,
            signature: Vec::new(),
            scheme: self.scheme,
            key_ids: key_ids.to_vec(),
        };
        req.signature = self
            .cdm
            .generate_rsa_signature(sid, &Message::from(req.clone()).signed_body(), self.scheme)
            .in_phase(phase)?;
        self.send(phase, &req.into())
    }

    /// Second half of [`Client::license`].
    pub fn accept_license(&mut self, sid: SessionId, raw: &[u8]) -> Result<License> {
        let phase = Phase::License;
        let resp = match Message::decode(raw) {
            Ok(Message::LicenseResponse(r)) => r,
            Ok(other) => return Err(ClientError::Unexpected { phase, got: other.msg_type().name() }),
            Err(source) => return Err(ClientError::Wire { phase, source }),
        };
        self.cdm
            .derive_keys_from_session_key(sid, &resp.enc_session_key, &self.device_blob)
            .in_phase(phase)?;
        let keys_loaded = self.cdm.load_keys(sid, raw).in_phase(phase)?;
        Ok(License { request_id: resp.request_id, keys_loaded })
    }

    /// Asks for a TTL extension of one key; returns the raw refresh response.
    pub fn request_refresh(&mut self, sid: SessionId, license: &License, key_id: &[u8]) -> Result<Vec<u8>> {
        let phase = Phase::Refresh;
        let nonce = self.cdm.generate_nonce(sid).in_phase(phase)?;
        let mut req = RefreshRequest {
            nonce,
            request_id: license.request_id.clone(),
            key_id: key_id.to_vec(),
            mac: [0; 32],
        };
        req.mac = self
            .cdm
            .generate_signature(sid, &Message::from(req.clone()).signed_body())
            .in_phase(phase)?;
        self.send(phase, &req.into())
    }

    pub fn refresh(&mut self, sid: SessionId, license: &License, key_id: &[u8]) -> Result<()> {
        let raw = self.request_refresh(sid, license, key_id)?;
        self.cdm.refresh_keys(sid, &raw).in_phase(Phase::Refresh)
    }

    pub fn decrypt(&mut self, sid: SessionId, package: &CencPackage) -> Result<Vec<u8>> {
        let phase = Phase::Decryption;
        self.cdm.select_key(sid, &package.key_id).in_phase(phase)?;
        self.cdm
            .decrypt_cenc(sid, &package.data, &package.subsamples, &package.iv)
            .in_phase(phase)
    }
}

/// Result of [`generic_round_trip`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenericOutcome {
    pub ciphertext: Vec<u8>,
    pub decrypted: Vec<u8>,
    pub tag: [u8; 32],
    pub verified: bool,
}

/// Encrypt, decrypt, sign and verify `payload` with the selected key.
pub fn generic_round_trip(cdm: &Cdm, sid: SessionId, key_id: &[u8], payload: &[u8], iv: &Iv) -> Result<GenericOutcome> {
    let phase = Phase::Generic;
    cdm.select_key(sid, key_id).in_phase(phase)?;
    let ciphertext = cdm.generic_encrypt(sid, payload, iv).in_phase(phase)?;
    let decrypted = cdm.generic_decrypt(sid, &ciphertext, iv).in_phase(phase)?;
    let tag = cdm.generic_sign(sid, payload).in_phase(phase)?;
    let verified = cdm.generic_verify(sid, payload, &tag).in_phase(phase)?;
    Ok(GenericOutcome { ciphertext, decrypted, tag, verified })
}

/// Parses a subsample plan: one `clear,protected` pair per line; `#` comments.
pub fn parse_plan(text: &str) -> std::result::Result<Vec<Subsample>, String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap().trim())
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let (c, p) = l.split_once(',').ok_or_else(|| format!("line {}: expected clear,protected", i + 1))?;
            let num = |s: &str| s.trim().parse::<usize>().map_err(|e| format!("line {}: {e}", i + 1));
            Ok(Subsample::new(num(c)?, num(p)?))
        })
        .collect()
}
