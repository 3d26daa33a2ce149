//! Persisted device RSA credential: IV (16) ‖ AES-128-CBC ciphertext ‖ HMAC-SHA256 (32).
//!
//! The ciphertext is the PKCS#8 DER of the RSA key encrypted under the
//! device storage key; the tag is HMAC(storage key, IV ‖ ciphertext).

use rand::{CryptoRng, RngCore};
use rsa::RsaPrivateKey;

use crate::crypto::{self, AesKey, HmacTag, Iv, AES_BLOCK_LEN, HMAC_TAG_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CredentialError {
    /// Wrong length or unparseable key material.
    Malformed,
    /// Tag does not verify under the storage key.
    BadMac,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceRsaCredential {
    pub iv: Iv,
    pub ciphertext: Vec<u8>,
    pub tag: HmacTag,
}

impl DeviceRsaCredential {
    pub fn seal<R: RngCore + CryptoRng>(pkcs8: &[u8], storage_key: &AesKey, rng: &mut R) -> Self {
        let iv: Iv = crypto::random_array(rng);
        let ciphertext = crypto::cbc_encrypt(storage_key, &iv, pkcs8);
        let mut covered = iv.to_vec();
        covered.extend_from_slice(&ciphertext);
        let tag = crypto::hmac_sha256(storage_key, &covered);
        DeviceRsaCredential { iv, ciphertext, tag }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(AES_BLOCK_LEN + self.ciphertext.len() + HMAC_TAG_LEN);
        out.extend_from_slice(&self.iv);
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_bytes(raw: &[u8]) -> Result<Self, CredentialError> {
        let min = AES_BLOCK_LEN + AES_BLOCK_LEN + HMAC_TAG_LEN;
        if raw.len() < min || !(raw.len() - AES_BLOCK_LEN - HMAC_TAG_LEN).is_multiple_of(AES_BLOCK_LEN) {
            return Err(CredentialError::Malformed);
        }
        let (iv, rest) = raw.split_at(AES_BLOCK_LEN);
        let (ciphertext, tag) = rest.split_at(rest.len() - HMAC_TAG_LEN);
        Ok(DeviceRsaCredential {
            iv: iv.try_into().unwrap(),
            ciphertext: ciphertext.to_vec(),
            tag: tag.try_into().unwrap(),
        })
    }

    /// MAC check first, then decrypt and parse.
    pub fn open(&self, storage_key: &AesKey) -> Result<RsaPrivateKey, CredentialError> {
        let mut covered = self.iv.to_vec();
        covered.extend_from_slice(&self.ciphertext);
        if !crypto::hmac_sha256_verify(storage_key, &covered, &self.tag) {
            return Err(CredentialError::BadMac);
        }
        let der = crypto::cbc_decrypt(storage_key, &self.iv, &self.ciphertext)
            .map_err(|_| CredentialError::Malformed)?;
        crypto::rsa_from_pkcs8(&der).map_err(|_| CredentialError::Malformed)
    }
}
