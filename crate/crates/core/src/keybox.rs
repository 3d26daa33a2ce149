//! The 128-byte keybox that anchors the key ladder.
//!
//! Layout, in order: device id (32), device key (16), provisioning token (72),
//! magic `"kbox"` (4), CRC-32 (4, big-endian) over the first 124 bytes.

use std::fmt;

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::crypto::{self, AesKey, Iv};

pub const KEYBOX_LEN: usize = 128;
pub const DEVICE_ID_LEN: usize = 32;
pub const DEVICE_KEY_LEN: usize = 16;
pub const PROVISIONING_TOKEN_LEN: usize = 72;
pub const KEYBOX_MAGIC: [u8; 4] = *b"kbox";
/// Bytes covered by the CRC: everything up to and including the magic.
pub const CRC_COVERED_LEN: usize = 124;
/// IV followed by the padded 128-byte keybox.
pub const WRAPPED_KEYBOX_LEN: usize = 16 + KEYBOX_LEN + 16;

const DEVICE_KEY_OFFSET: usize = 32;
const TOKEN_OFFSET: usize = 48;
const MAGIC_OFFSET: usize = 120;
const CRC_OFFSET: usize = 124;

#[derive(Debug, Error)]
pub enum KeyboxError {
    #[error("keybox must be {KEYBOX_LEN} bytes, got {0}")]
    Length(usize),
    #[error("entropy source failed: {0}")]
    Entropy(String),
    #[error("unwrapped keybox failed integrity check ({0})")]
    Integrity(Verdict),
}

/// Outcome of [`Keybox::validate`]. The magic is checked before the CRC.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Ok,
    BadMagic,
    BadCrc,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Ok => "OK",
            Verdict::BadMagic => "BadMagic",
            Verdict::BadCrc => "BadCrc",
        })
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Keybox {
    pub device_id: [u8; DEVICE_ID_LEN],
    pub device_key: AesKey,
    pub provisioning_token: [u8; PROVISIONING_TOKEN_LEN],
    pub magic: [u8; 4],
    pub crc: u32,
}

// Keep the device key out of logs.
impl fmt::Debug for Keybox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Keybox")
            .field("device_id", &hex::encode(self.device_id))
            .field("magic", &String::from_utf8_lossy(&self.magic))
            .field("crc", &format_args!("{:08x}", self.crc))
            .finish_non_exhaustive()
    }
}

pub fn crc32(data: &[u8]) -> u32 {
    crc32fast::hash(data)
}

impl Keybox {
    /// Slices a raw buffer into fields. Does not check magic or CRC.
    pub fn parse(raw: &[u8]) -> Result<Keybox, KeyboxError> {
        let raw: &[u8; KEYBOX_LEN] = raw.try_into().map_err(|_| KeyboxError::Length(raw.len()))?;
        let mut kb = Keybox {
            device_id: [0; DEVICE_ID_LEN],
            device_key: [0; DEVICE_KEY_LEN],
            provisioning_token: [0; PROVISIONING_TOKEN_LEN],
            magic: [0; 4],
            crc: 0,
        };
        kb.device_id.copy_from_slice(&raw[..DEVICE_KEY_OFFSET]);
        kb.device_key.copy_from_slice(&raw[DEVICE_KEY_OFFSET..TOKEN_OFFSET]);
        kb.provisioning_token.copy_from_slice(&raw[TOKEN_OFFSET..MAGIC_OFFSET]);
        kb.magic.copy_from_slice(&raw[MAGIC_OFFSET..CRC_OFFSET]);
        kb.crc = u32::from_be_bytes(raw[CRC_OFFSET..].try_into().unwrap());
        Ok(kb)
    }

    pub fn to_bytes(&self) -> [u8; KEYBOX_LEN] {
        let mut out = [0u8; KEYBOX_LEN];
        out[..DEVICE_KEY_OFFSET].copy_from_slice(&self.device_id);
        out[DEVICE_KEY_OFFSET..TOKEN_OFFSET].copy_from_slice(&self.device_key);
        out[TOKEN_OFFSET..MAGIC_OFFSET].copy_from_slice(&self.provisioning_token);
        out[MAGIC_OFFSET..CRC_OFFSET].copy_from_slice(&self.magic);
        out[CRC_OFFSET..].copy_from_slice(&self.crc.to_be_bytes());
        out
    }

    pub fn validate(&self) -> Verdict {
        if self.magic != KEYBOX_MAGIC {
            return Verdict::BadMagic;
        }
        if self.crc != crc32(&self.to_bytes()[..CRC_COVERED_LEN]) {
            return Verdict::BadCrc;
        }
        Verdict::Ok
    }

    pub fn is_valid(&self) -> bool {
        self.validate() == Verdict::Ok
    }

    /// Builds a keybox around the given fields, filling in magic and CRC.
    pub fn from_parts(
        device_id: [u8; DEVICE_ID_LEN],
        device_key: AesKey,
        provisioning_token: [u8; PROVISIONING_TOKEN_LEN],
    ) -> Keybox {
        let mut kb = Keybox {
            device_id,
            device_key,
            provisioning_token,
            magic: KEYBOX_MAGIC,
            crc: 0,
        };
        kb.crc = crc32(&kb.to_bytes()[..CRC_COVERED_LEN]);
        kb
    }

    /// Draws a fresh synthetic keybox from `rng`.
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Result<Keybox, KeyboxError> {
        let mut material = [0u8; DEVICE_ID_LEN + DEVICE_KEY_LEN + PROVISIONING_TOKEN_LEN];
        rng.try_fill_bytes(&mut material)
            .map_err(|e| KeyboxError::Entropy(e.to_string()))?;
        Ok(Keybox::from_parts(
            material[..DEVICE_KEY_OFFSET].try_into().unwrap(),
            material[DEVICE_KEY_OFFSET..TOKEN_OFFSET].try_into().unwrap(),
            material[TOKEN_OFFSET..].try_into().unwrap(),
        ))
    }

    /// Encrypts the serialized keybox under a transport key: IV ‖ AES-128-CBC(PKCS#7).
    pub fn wrap<R: RngCore + CryptoRng>(&self, transport_key: &AesKey, rng: &mut R) -> Vec<u8> {
        let iv: Iv = crypto::random_array(rng);
        let mut out = iv.to_vec();
        out.extend(crypto::cbc_encrypt(transport_key, &iv, &self.to_bytes()));
        out
    }

    /// Inverse of [`Keybox::wrap`]; the recovered keybox must validate.
    pub fn install(wrapped: &[u8], transport_key: &AesKey) -> Result<Keybox, KeyboxError> {
        if wrapped.len() != WRAPPED_KEYBOX_LEN {
            return Err(KeyboxError::Length(wrapped.len()));
        }
        let iv: Iv = wrapped[..16].try_into().unwrap();
        let plain = crypto::cbc_decrypt(transport_key, &iv, &wrapped[16..])
            .map_err(|_| KeyboxError::Integrity(Verdict::BadCrc))?;
        let kb = Keybox::parse(&plain).map_err(|_| KeyboxError::Integrity(Verdict::BadCrc))?;
        match kb.validate() {
            Verdict::Ok => Ok(kb),
            v => Err(KeyboxError::Integrity(v)),
        }
    }
}
