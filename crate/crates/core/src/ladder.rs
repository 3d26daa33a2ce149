//! Key derivation: AES-128-CMAC over counter-labelled contexts.
//!
//! Every derivation turns a 128-bit parent key and a device blob into an
//! asset key (128 bits) plus client and server MAC keys (256 bits each),
//! five CMAC invocations in total:
//!
//! ```text
//! asset      = CMAC(parent, "1ENCRYPTION"     ‖ blob)
//! mac_client = CMAC(parent, "1AUTHENTICATION" ‖ blob) ‖ CMAC(parent, "2AUTHENTICATION" ‖ blob)
//! mac_server = CMAC(parent, "3AUTHENTICATION" ‖ blob) ‖ CMAC(parent, "4AUTHENTICATION" ‖ blob)
//! ```

use std::fmt;

use thiserror::Error;

use crate::crypto::{self, AesKey};
use crate::keybox::Keybox;

pub const ENCRYPTION_LABEL: &[u8] = b"ENCRYPTION";
pub const AUTHENTICATION_LABEL: &[u8] = b"AUTHENTICATION";
pub const MAC_KEY_LEN: usize = 32;

const STORAGE_LABEL: &[u8] = b"STORAGE";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DerivationError {
    #[error("device blob must not be empty")]
    EmptyBlob,
    #[error("parent key must be 16 bytes, got {0}")]
    KeyLength(usize),
}

#[derive(Clone, PartialEq, Eq)]
pub struct DerivedKeySet {
    pub asset_key: AesKey,
    pub mac_client_key: [u8; MAC_KEY_LEN],
    pub mac_server_key: [u8; MAC_KEY_LEN],
}

impl fmt::Debug for DerivedKeySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DerivedKeySet { .. }")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DerivationContext {
    /// `'1' ‖ "ENCRYPTION" ‖ blob`
    pub encryption_context: Vec<u8>,
    /// `"AUTHENTICATION" ‖ blob`; the counter digit is prepended per chunk.
    pub mac_context_base: Vec<u8>,
}

impl DerivationContext {
    /// MAC context for counter 1..=4.
    pub fn mac_context(&self, counter: u8) -> Vec<u8> {
        debug_assert!((1..=4).contains(&counter));
        let mut ctx = Vec::with_capacity(1 + self.mac_context_base.len());
        ctx.push(b'0' + counter);
        ctx.extend_from_slice(&self.mac_context_base);
        ctx
    }
}

pub fn build_contexts(device_blob: &[u8]) -> Result<DerivationContext, DerivationError> {
    if device_blob.is_empty() {
        return Err(DerivationError::EmptyBlob);
    }
    let mut encryption_context = Vec::with_capacity(1 + ENCRYPTION_LABEL.len() + device_blob.len());
    encryption_context.push(b'1');
    encryption_context.extend_from_slice(ENCRYPTION_LABEL);
    encryption_context.extend_from_slice(device_blob);

    let mut mac_context_base = AUTHENTICATION_LABEL.to_vec();
    mac_context_base.extend_from_slice(device_blob);

    Ok(DerivationContext {
        encryption_context,
        mac_context_base,
    })
}

pub fn derive_keys(parent_key: &[u8], ctx: &DerivationContext) -> Result<DerivedKeySet, DerivationError> {
    let parent = crypto::aes_key(parent_key).map_err(|_| DerivationError::KeyLength(parent_key.len()))?;
    let chunk = |counter| crypto::aes_cmac(&parent, &ctx.mac_context(counter));

    let mut mac_client_key = [0u8; MAC_KEY_LEN];
    mac_client_key[..16].copy_from_slice(&chunk(1));
    mac_client_key[16..].copy_from_slice(&chunk(2));
    let mut mac_server_key = [0u8; MAC_KEY_LEN];
    mac_server_key[..16].copy_from_slice(&chunk(3));
    mac_server_key[16..].copy_from_slice(&chunk(4));

    Ok(DerivedKeySet {
        asset_key: crypto::aes_cmac(&parent, &ctx.encryption_context),
        mac_client_key,
        mac_server_key,
    })
}

/// Blob mixed into the provisioning-phase derivation: token ‖ device id.
pub fn provisioning_blob(keybox: &Keybox) -> Vec<u8> {
    let mut blob = keybox.provisioning_token.to_vec();
    blob.extend_from_slice(&keybox.device_id);
    blob
}

/// Derivation rooted at the keybox device key, shared by the CDM and the
/// provisioning server.
pub fn provisioning_keys(keybox: &Keybox) -> DerivedKeySet {
    let ctx = build_contexts(&provisioning_blob(keybox)).expect("provisioning blob is 104 bytes");
    derive_keys(&keybox.device_key, &ctx).expect("device key is 16 bytes")
}

/// Device-unique key protecting the persisted RSA credential.
pub fn storage_key(keybox: &Keybox) -> AesKey {
    let mut ctx = vec![b'1'];
    ctx.extend_from_slice(STORAGE_LABEL);
    ctx.extend_from_slice(&keybox.device_id);
    crypto::aes_cmac(&keybox.device_key, &ctx)
}
