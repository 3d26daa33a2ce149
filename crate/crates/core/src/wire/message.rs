//! Typed protocol messages on top of [`Frame`].
//!
//! Each type encodes to exactly one byte string. Messages protected by an
//! HMAC tag expose [`Message::signed_body`], the frame prefix the tag covers;
//! license requests sign the frame with the signature field left out.

use super::frame::{self, entry_tag, tag, Field, Frame, Malformed, MsgType, WireError};
use crate::crypto::{HmacTag, Iv, SignatureScheme};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvisioningRequest {
    pub nonce: u32,
    pub device_id: [u8; 32],
    pub provisioning_token: [u8; 72],
    pub request_id: Vec<u8>,
    pub mac: HmacTag,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvisioningResponse {
    pub nonce: u32,
    pub iv: Iv,
    pub ciphertext: Vec<u8>,
    pub mac: HmacTag,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LicenseRequest {
    pub nonce: u32,
    pub device_id: [u8; 32],
    pub device_blob: Vec<u8>,
    pub request_id: Vec<u8>,
    pub signature: Vec<u8>,
    pub scheme: SignatureScheme,
    pub key_ids: Vec<Vec<u8>>,
}

/// One content key as delivered in a license: the key is AES-CBC encrypted
/// under the asset key with `iv`; the control block is either clear or
/// single-block CBC encrypted under the content key with the same `iv`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyEntry {
    pub key_id: Vec<u8>,
    pub iv: Iv,
    pub enc_key: Vec<u8>,
    pub kcb: [u8; 16],
    pub kcb_encrypted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LicenseResponse {
    pub nonce: u32,
    pub request_id: Vec<u8>,
    pub enc_session_key: Vec<u8>,
    pub keys: Vec<KeyEntry>,
    /// IV ‖ AES-CBC(asset key, new 32-byte server MAC key).
    pub new_server_mac_key: Option<Vec<u8>>,
    pub mac: HmacTag,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefreshRequest {
    pub nonce: u32,
    pub request_id: Vec<u8>,
    pub key_id: Vec<u8>,
    pub mac: HmacTag,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefreshResponse {
    pub nonce: u32,
    pub request_id: Vec<u8>,
    /// Optional full control block for the key; only its TTL is honoured.
    pub control: Option<KeyEntry>,
    pub key_id: Vec<u8>,
    pub ttl: u32,
    pub mac: HmacTag,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorMessage {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    ProvisioningRequest(ProvisioningRequest),
    ProvisioningResponse(ProvisioningResponse),
    LicenseRequest(LicenseRequest),
    LicenseResponse(LicenseResponse),
    RefreshRequest(RefreshRequest),
    RefreshResponse(RefreshResponse),
    Error(ErrorMessage),
}

impl KeyEntry {
    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        frame::encode_fields(
            &mut out,
            &[
                Field::new(entry_tag::KEY_ID, self.key_id.clone()),
                Field::new(entry_tag::IV, self.iv),
                Field::new(entry_tag::ENC_KEY, self.enc_key.clone()),
                Field::new(entry_tag::KCB, self.kcb),
                Field::new(entry_tag::KCB_ENCRYPTED, [self.kcb_encrypted as u8]),
            ],
        );
        out
    }

    fn decode(bytes: &[u8]) -> Result<KeyEntry, Malformed> {
        let fields = frame::decode_entry_fields(bytes)?;
        let get = |t| {
            fields
                .iter()
                .find(|f| f.tag == t)
                .map(|f| f.value.as_slice())
                .ok_or(Malformed::MissingField(t))
        };
        let kcb_encrypted = match get(entry_tag::KCB_ENCRYPTED)? {
            [0] => false,
            [1] => true,
            _ => return Err(Malformed::BadValue(entry_tag::KCB_ENCRYPTED)),
        };
        Ok(KeyEntry {
            key_id: get(entry_tag::KEY_ID)?.to_vec(),
            iv: get(entry_tag::IV)?.try_into().unwrap(),
            enc_key: get(entry_tag::ENC_KEY)?.to_vec(),
            kcb: get(entry_tag::KCB)?.try_into().unwrap(),
            kcb_encrypted,
        })
    }
}

fn encode_key_id_list(ids: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::new();
    for id in ids {
        out.extend_from_slice(&(id.len() as u16).to_be_bytes());
        out.extend_from_slice(id);
    }
    out
}

fn decode_key_id_list(mut buf: &[u8]) -> Result<Vec<Vec<u8>>, Malformed> {
    let mut ids = Vec::new();
    while !buf.is_empty() {
        if buf.len() < 2 {
            return Err(Malformed::BadValue(tag::KEY_ID));
        }
        let n = u16::from_be_bytes([buf[0], buf[1]]) as usize;
        if buf.len() < 2 + n {
            return Err(Malformed::BadValue(tag::KEY_ID));
        }
        ids.push(buf[2..2 + n].to_vec());
        buf = &buf[2 + n..];
    }
    Ok(ids)
}

fn u32_field(f: &Frame, t: u16) -> Result<u32, Malformed> {
    Ok(u32::from_be_bytes(f.require(t)?.try_into().unwrap()))
}

fn array_field<const N: usize>(f: &Frame, t: u16) -> Result<[u8; N], Malformed> {
    Ok(f.require(t)?.try_into().unwrap())
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::ProvisioningRequest(_) => MsgType::ProvReq,
            Message::ProvisioningResponse(_) => MsgType::ProvResp,
            Message::LicenseRequest(_) => MsgType::LicReq,
            Message::LicenseResponse(_) => MsgType::LicResp,
            Message::RefreshRequest(_) => MsgType::RefreshReq,
            Message::RefreshResponse(_) => MsgType::RefreshResp,
            Message::Error(_) => MsgType::Error,
        }
    }

    /// Fields in canonical order, without the HMAC tag or RSA signature.
    fn body_frame(&self) -> Frame {
        let f = Frame::new(self.msg_type());
        match self {
            Message::ProvisioningRequest(m) => f
                .with(tag::NONCE, m.nonce.to_be_bytes())
                .with(tag::DEVICE_ID, m.device_id)
                .with(tag::PROVISIONING_TOKEN, m.provisioning_token)
                .with(tag::REQUEST_ID, m.request_id.clone()),
            Message::ProvisioningResponse(m) => f
                .with(tag::NONCE, m.nonce.to_be_bytes())
                .with(tag::IV, m.iv)
                .with(tag::CIPHERTEXT, m.ciphertext.clone()),
            Message::LicenseRequest(m) => f
                .with(tag::NONCE, m.nonce.to_be_bytes())
                .with(tag::DEVICE_ID, m.device_id)
                .with(tag::DEVICE_BLOB, m.device_blob.clone())
                .with(tag::REQUEST_ID, m.request_id.clone())
                .with(tag::SIG_SCHEME, [m.scheme.wire_value()])
                .with(tag::KEY_ID, encode_key_id_list(&m.key_ids)),
            Message::LicenseResponse(m) => {
                let mut f = f
                    .with(tag::NONCE, m.nonce.to_be_bytes())
                    .with(tag::REQUEST_ID, m.request_id.clone())
                    .with(tag::ENC_SESSION_KEY, m.enc_session_key.clone());
                for k in &m.keys {
                    f = f.with(tag::KEY_ENTRY, k.encode());
                }
                if let Some(ct) = &m.new_server_mac_key {
                    f = f.with(tag::NEW_SERVER_MAC_KEY_CT, ct.clone());
                }
                f
            }
            Message::RefreshRequest(m) => f
                .with(tag::NONCE, m.nonce.to_be_bytes())
                .with(tag::REQUEST_ID, m.request_id.clone())
                .with(tag::KEY_ID, m.key_id.clone()),
            Message::RefreshResponse(m) => {
                let mut f = f
                    .with(tag::NONCE, m.nonce.to_be_bytes())
                    .with(tag::REQUEST_ID, m.request_id.clone());
                if let Some(k) = &m.control {
                    f = f.with(tag::KEY_ENTRY, k.encode());
                }
                f.with(tag::KEY_ID, m.key_id.clone()).with(tag::TTL, m.ttl.to_be_bytes())
            }
            Message::Error(m) => f.with(tag::ERROR_TEXT, m.text.as_bytes()),
        }
    }

    fn mac(&self) -> Option<&HmacTag> {
        match self {
            Message::ProvisioningRequest(m) => Some(&m.mac),
            Message::ProvisioningResponse(m) => Some(&m.mac),
            Message::LicenseResponse(m) => Some(&m.mac),
            Message::RefreshRequest(m) => Some(&m.mac),
            Message::RefreshResponse(m) => Some(&m.mac),
            Message::LicenseRequest(_) | Message::Error(_) => None,
        }
    }

    pub fn to_frame(&self) -> Frame {
        let mut f = self.body_frame();
        if let Message::LicenseRequest(m) = self {
            let at = f.fields.iter().position(|x| x.tag > tag::RSA_SIGNATURE).unwrap_or(f.fields.len());
            f.fields.insert(at, Field::new(tag::RSA_SIGNATURE, m.signature.clone()));
        }
        if let Some(mac) = self.mac() {
            f.fields.push(Field::new(tag::HMAC_TAG, *mac));
        }
        f
    }

    /// The bytes an HMAC tag or RSA signature is computed over.
    pub fn signed_body(&self) -> Vec<u8> {
        self.body_frame().encode()
    }

    pub fn encode(&self) -> Vec<u8> {
        self.to_frame().encode()
    }

    pub fn decode(bytes: &[u8]) -> Result<Message, WireError> {
        Ok(Message::from_frame(&Frame::decode(bytes)?)?)
    }

    pub fn from_frame(f: &Frame) -> Result<Message, Malformed> {
        let nonce = || u32_field(f, tag::NONCE);
        let bytes = |t| f.require(t).map(<[u8]>::to_vec);
        let mac = || array_field::<32>(f, tag::HMAC_TAG);
        Ok(match f.msg_type {
            MsgType::ProvReq => Message::ProvisioningRequest(ProvisioningRequest {
                nonce: nonce()?,
                device_id: array_field(f, tag::DEVICE_ID)?,
                provisioning_token: array_field(f, tag::PROVISIONING_TOKEN)?,
                request_id: bytes(tag::REQUEST_ID)?,
                mac: mac()?,
            }),
            MsgType::ProvResp => Message::ProvisioningResponse(ProvisioningResponse {
                nonce: nonce()?,
                iv: array_field(f, tag::IV)?,
                ciphertext: bytes(tag::CIPHERTEXT)?,
                mac: mac()?,
            }),
            MsgType::LicReq => {
                let [scheme] = array_field::<1>(f, tag::SIG_SCHEME)?;
                Message::LicenseRequest(LicenseRequest {
                    nonce: nonce()?,
                    device_id: array_field(f, tag::DEVICE_ID)?,
                    device_blob: bytes(tag::DEVICE_BLOB)?,
                    request_id: bytes(tag::REQUEST_ID)?,
                    signature: bytes(tag::RSA_SIGNATURE)?,
                    scheme: SignatureScheme::from_wire(scheme).ok_or(Malformed::BadValue(tag::SIG_SCHEME))?,
                    key_ids: decode_key_id_list(f.require(tag::KEY_ID)?)?,
                })
            }
            MsgType::LicResp => Message::LicenseResponse(LicenseResponse {
                nonce: nonce()?,
                request_id: bytes(tag::REQUEST_ID)?,
                enc_session_key: bytes(tag::ENC_SESSION_KEY)?,
                keys: f.get_all(tag::KEY_ENTRY).map(KeyEntry::decode).collect::<Result<_, _>>()?,
                new_server_mac_key: f.get(tag::NEW_SERVER_MAC_KEY_CT).map(<[u8]>::to_vec),
                mac: mac()?,
            }),
            MsgType::RefreshReq => Message::RefreshRequest(RefreshRequest {
                nonce: nonce()?,
                request_id: bytes(tag::REQUEST_ID)?,
                key_id: bytes(tag::KEY_ID)?,
                mac: mac()?,
            }),
            MsgType::RefreshResp => Message::RefreshResponse(RefreshResponse {
                nonce: nonce()?,
                request_id: bytes(tag::REQUEST_ID)?,
                control: f.get(tag::KEY_ENTRY).map(KeyEntry::decode).transpose()?,
                key_id: bytes(tag::KEY_ID)?,
                ttl: u32_field(f, tag::TTL)?,
                mac: mac()?,
            }),
            MsgType::Error => Message::Error(ErrorMessage {
                text: String::from_utf8(bytes(tag::ERROR_TEXT)?).map_err(|_| Malformed::BadValue(tag::ERROR_TEXT))?,
            }),
        })
    }
}

macro_rules! message_from {
    ($($variant:ident),*) => {
        $(impl From<$variant> for Message {
            fn from(m: $variant) -> Message {
                Message::$variant(m)
            }
        })*
    };
}

message_from!(
    ProvisioningRequest,
    ProvisioningResponse,
    LicenseRequest,
    LicenseResponse,
    RefreshRequest,
    RefreshResponse
);

impl From<ErrorMessage> for Message {
    fn from(m: ErrorMessage) -> Message {
        Message::Error(m)
    }
}
