//! Primitive contracts shared by the client and the servers.
//!
//! Everything in the ladder is built from AES-128 (CBC with PKCS#7 for key and
//! generic data, CTR for media), AES-128-CMAC as the derivation PRF,
//! HMAC-SHA256 for every tag, and RSA-2048 (OAEP-SHA1 for session keys,
//! PSS-SHA1 or PKCS#1 v1.5-SHA1 for request signatures).

use aes::cipher::block_padding::{NoPadding, Pkcs7};
use aes::cipher::{BlockDecryptMut, BlockEncryptMut, KeyIvInit, StreamCipher};
use aes::Aes128;
use cmac::{Cmac, Mac};
use hmac::Hmac;
use rand::{CryptoRng, RngCore};
use rsa::pkcs8::{DecodePrivateKey, EncodePrivateKey};
use rsa::signature::{RandomizedSigner, SignatureEncoding, Signer, Verifier};
use rsa::{Oaep, RsaPrivateKey, RsaPublicKey};
use sha1::Sha1;
use sha2::Sha256;
use thiserror::Error;

pub const AES_BLOCK_LEN: usize = 16;
pub const AES_KEY_LEN: usize = 16;
pub const HMAC_TAG_LEN: usize = 32;
pub const RSA_MODULUS_BITS: usize = 2048;
pub const RSA_MODULUS_LEN: usize = RSA_MODULUS_BITS / 8;

pub type AesKey = [u8; AES_KEY_LEN];
pub type Iv = [u8; AES_BLOCK_LEN];
pub type HmacTag = [u8; HMAC_TAG_LEN];

type Aes128CbcEnc = cbc::Encryptor<Aes128>;
type Aes128CbcDec = cbc::Decryptor<Aes128>;
type Aes128Ctr = ctr::Ctr128BE<Aes128>;
type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("key must be {expected} bytes, got {actual}")]
    KeyLength { expected: usize, actual: usize },
    #[error("bad PKCS#7 padding")]
    BadPadding,
    #[error("ciphertext is not a whole number of blocks")]
    BlockLength,
    #[error("RSA-OAEP decryption failed")]
    Oaep,
    #[error("RSA operation failed: {0}")]
    Rsa(String),
    #[error("malformed PKCS#8 RSA private key")]
    Pkcs8,
}

/// RSA request-signature scheme; wire value 1 is PSS, 2 is PKCS#1 v1.5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum SignatureScheme {
    #[default]
    Pss,
    Pkcs1v15,
}

impl SignatureScheme {
    pub fn wire_value(self) -> u8 {
        match self {
            SignatureScheme::Pss => 1,
            SignatureScheme::Pkcs1v15 => 2,
        }
    }

    pub fn from_wire(v: u8) -> Option<Self> {
        match v {
            1 => Some(SignatureScheme::Pss),
            2 => Some(SignatureScheme::Pkcs1v15),
            _ => None,
        }
    }
}

pub fn aes_key(bytes: &[u8]) -> Result<AesKey, CryptoError> {
    bytes.try_into().map_err(|_| CryptoError::KeyLength {
        expected: AES_KEY_LEN,
        actual: bytes.len(),
    })
}

pub fn cbc_encrypt(key: &AesKey, iv: &Iv, plaintext: &[u8]) -> Vec<u8> {
    Aes128CbcEnc::new(key.into(), iv.into()).encrypt_padded_vec_mut::<Pkcs7>(plaintext)
}

pub fn cbc_decrypt(key: &AesKey, iv: &Iv, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if ciphertext.is_empty() || !ciphertext.len().is_multiple_of(AES_BLOCK_LEN) {
        return Err(CryptoError::BlockLength);
    }
    Aes128CbcDec::new(key.into(), iv.into())
        .decrypt_padded_vec_mut::<Pkcs7>(ciphertext)
        .map_err(|_| CryptoError::BadPadding)
}

/// Single-block CBC without padding, used for key control blocks.
pub fn cbc_encrypt_block(key: &AesKey, iv: &Iv, block: &[u8; 16]) -> [u8; 16] {
    let out = Aes128CbcEnc::new(key.into(), iv.into()).encrypt_padded_vec_mut::<NoPadding>(block);
    out.try_into().expect("one block in, one block out")
}

pub fn cbc_decrypt_block(key: &AesKey, iv: &Iv, block: &[u8; 16]) -> [u8; 16] {
    let out = Aes128CbcDec::new(key.into(), iv.into())
        .decrypt_padded_vec_mut::<NoPadding>(block)
        .expect("no padding to check");
    out.try_into().expect("one block in, one block out")
}

/// Big-endian 128-bit counter mode. Successive calls on the same
/// [`CtrStream`] continue the keystream byte-for-byte.
pub struct CtrStream(Aes128Ctr);

impl CtrStream {
    pub fn new(key: &AesKey, iv: &Iv) -> Self {
        CtrStream(Aes128Ctr::new(key.into(), iv.into()))
    }

    pub fn apply(&mut self, buf: &mut [u8]) {
        self.0.apply_keystream(buf);
    }
}

pub fn aes_cmac(key: &AesKey, message: &[u8]) -> [u8; 16] {
    let mut mac = <Cmac<Aes128> as Mac>::new_from_slice(key).expect("16-byte key");
    mac.update(message);
    mac.finalize().into_bytes().into()
}

pub fn hmac_sha256(key: &[u8], message: &[u8]) -> HmacTag {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(message);
    mac.finalize().into_bytes().into()
}

/// Constant-time tag check.
pub fn hmac_sha256_verify(key: &[u8], message: &[u8], tag: &[u8]) -> bool {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(message);
    mac.verify_slice(tag).is_ok()
}

pub fn random_array<const N: usize, R: RngCore + CryptoRng>(rng: &mut R) -> [u8; N] {
    let mut out = [0u8; N];
    rng.fill_bytes(&mut out);
    out
}

pub fn generate_rsa_key<R: RngCore + CryptoRng>(rng: &mut R) -> Result<RsaPrivateKey, CryptoError> {
    RsaPrivateKey::new(rng, RSA_MODULUS_BITS).map_err(|e| CryptoError::Rsa(e.to_string()))
}

pub fn rsa_to_pkcs8(key: &RsaPrivateKey) -> Result<Vec<u8>, CryptoError> {
    key.to_pkcs8_der()
        .map(|doc| doc.as_bytes().to_vec())
        .map_err(|e| CryptoError::Rsa(e.to_string()))
}

pub fn rsa_from_pkcs8(der: &[u8]) -> Result<RsaPrivateKey, CryptoError> {
    RsaPrivateKey::from_pkcs8_der(der).map_err(|_| CryptoError::Pkcs8)
}

pub fn rsa_oaep_encrypt<R: RngCore + CryptoRng>(
    rng: &mut R,
    key: &RsaPublicKey,
    message: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    key.encrypt(rng, Oaep::new::<Sha1>(), message)
        .map_err(|e| CryptoError::Rsa(e.to_string()))
}

pub fn rsa_oaep_decrypt(key: &RsaPrivateKey, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
    key.decrypt(Oaep::new::<Sha1>(), ciphertext)
        .map_err(|_| CryptoError::Oaep)
}

pub fn rsa_sign<R: RngCore + CryptoRng>(
    rng: &mut R,
    key: &RsaPrivateKey,
    scheme: SignatureScheme,
    message: &[u8],
) -> Vec<u8> {
    match scheme {
        SignatureScheme::Pss => rsa::pss::SigningKey::<Sha1>::new(key.clone())
            .sign_with_rng(rng, message)
            .to_vec(),
        SignatureScheme::Pkcs1v15 => rsa::pkcs1v15::SigningKey::<Sha1>::new(key.clone())
            .sign(message)
            .to_vec(),
    }
}

pub fn rsa_verify(
    key: &RsaPublicKey,
    scheme: SignatureScheme,
    message: &[u8],
    signature: &[u8],
) -> bool {
    match scheme {
        SignatureScheme::Pss => {
            let Ok(sig) = rsa::pss::Signature::try_from(signature) else {
                return false;
            };
            rsa::pss::VerifyingKey::<Sha1>::new(key.clone())
                .verify(message, &sig)
                .is_ok()
        }
        SignatureScheme::Pkcs1v15 => {
            let Ok(sig) = rsa::pkcs1v15::Signature::try_from(signature) else {
                return false;
            };
            rsa::pkcs1v15::VerifyingKey::<Sha1>::new(key.clone())
                .verify(message, &sig)
                .is_ok()
        }
    }
}
