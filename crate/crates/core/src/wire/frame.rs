use thiserror::Error;

pub const FRAME_MAGIC: [u8; 6] = *b"WVSIM1";
pub const HEADER_LEN: usize = FRAME_MAGIC.len() + 1;
pub const FIELD_HEADER_LEN: usize = 2 + 4;
/// Encoded size of the trailing HMAC field: header plus 32-byte tag.
pub const MAC_FIELD_LEN: usize = FIELD_HEADER_LEN + 32;

/// Top-level field tags.
pub mod tag {
    pub const NONCE: u16 = 0x0001;
    pub const DEVICE_ID: u16 = 0x0002;
    pub const PROVISIONING_TOKEN: u16 = 0x0003;
    pub const DEVICE_BLOB: u16 = 0x0004;
    pub const REQUEST_ID: u16 = 0x0005;
    pub const IV: u16 = 0x0006;
    pub const CIPHERTEXT: u16 = 0x0007;
    pub const HMAC_TAG: u16 = 0x0008;
    pub const RSA_SIGNATURE: u16 = 0x0009;
    pub const SIG_SCHEME: u16 = 0x000A;
    pub const ENC_SESSION_KEY: u16 = 0x000B;
    pub const KEY_ENTRY: u16 = 0x000C;
    pub const NEW_SERVER_MAC_KEY_CT: u16 = 0x000D;
    pub const KEY_ID: u16 = 0x000E;
    pub const TTL: u16 = 0x000F;
    pub const ERROR_TEXT: u16 = 0x0010;
}

/// Tags inside a nested key entry.
pub mod entry_tag {
    pub const KEY_ID: u16 = 0x01;
    pub const IV: u16 = 0x02;
    pub const ENC_KEY: u16 = 0x03;
    pub const KCB: u16 = 0x04;
    pub const KCB_ENCRYPTED: u16 = 0x05;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    ProvReq = 1,
    ProvResp = 2,
    LicReq = 3,
    LicResp = 4,
    RefreshReq = 5,
    RefreshResp = 6,
    Error = 7,
}

impl MsgType {
    pub const ALL: [MsgType; 7] = [
        MsgType::ProvReq,
        MsgType::ProvResp,
        MsgType::LicReq,
        MsgType::LicResp,
        MsgType::RefreshReq,
        MsgType::RefreshResp,
        MsgType::Error,
    ];

    pub fn from_u8(v: u8) -> Option<MsgType> {
        MsgType::ALL.into_iter().find(|t| *t as u8 == v)
    }

    pub fn name(self) -> &'static str {
        match self {
            MsgType::ProvReq => "ProvReq",
            MsgType::ProvResp => "ProvResp",
            MsgType::LicReq => "LicReq",
            MsgType::LicResp => "LicResp",
            MsgType::RefreshReq => "RefreshReq",
            MsgType::RefreshResp => "RefreshResp",
            MsgType::Error => "Error",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Malformed {
    #[error("bad frame magic")]
    BadMagic,
    #[error("truncated")]
    Truncated,
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
    #[error("tag {tag:#06x} after {prev:#06x} breaks ascending order")]
    TagOrder { prev: u16, tag: u16 },
    #[error("tag {0:#06x} not allowed here")]
    UnknownTag(u16),
    #[error("tag {tag:#06x} must be {expected} bytes, got {actual}")]
    FieldLength { tag: u16, expected: usize, actual: usize },
    #[error("HMAC tag field must be last")]
    MacNotLast,
    #[error("bad value in tag {0:#06x}")]
    BadValue(u16),
    #[error("missing required tag {0:#06x}")]
    MissingField(u16),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("malformed frame: {0}")]
    MalformedFrame(#[from] Malformed),
    #[error("unknown message type {0:#04x}")]
    UnknownMsgType(u8),
}

#[derive(Debug, Clone, Copy)]
enum Len {
    Fixed(usize),
    Var,
}

#[derive(Debug, Clone, Copy)]
struct FieldSpec {
    tag: u16,
    len: Len,
    repeatable: bool,
}

const fn fixed(tag: u16, n: usize) -> FieldSpec {
    FieldSpec { tag, len: Len::Fixed(n), repeatable: false }
}

const fn var(tag: u16) -> FieldSpec {
    FieldSpec { tag, len: Len::Var, repeatable: false }
}

const NONCE_SPEC: FieldSpec = fixed(tag::NONCE, 4);
const HMAC_SPEC: FieldSpec = fixed(tag::HMAC_TAG, 32);

fn schema(t: MsgType) -> &'static [FieldSpec] {
    use tag::*;
    const PROV_REQ: &[FieldSpec] = &[
        NONCE_SPEC,
        fixed(DEVICE_ID, 32),
        fixed(PROVISIONING_TOKEN, 72),
        var(REQUEST_ID),
        HMAC_SPEC,
    ];
    const PROV_RESP: &[FieldSpec] = &[NONCE_SPEC, fixed(IV, 16), var(CIPHERTEXT), HMAC_SPEC];
    const LIC_REQ: &[FieldSpec] = &[
        NONCE_SPEC,
        fixed(DEVICE_ID, 32),
        var(DEVICE_BLOB),
        var(REQUEST_ID),
        var(RSA_SIGNATURE),
        fixed(SIG_SCHEME, 1),
        var(KEY_ID),
    ];
    const LIC_RESP: &[FieldSpec] = &[
        NONCE_SPEC,
        var(REQUEST_ID),
        fixed(ENC_SESSION_KEY, 256),
        FieldSpec { tag: KEY_ENTRY, len: Len::Var, repeatable: true },
        var(NEW_SERVER_MAC_KEY_CT),
        HMAC_SPEC,
    ];
    const REFRESH_REQ: &[FieldSpec] = &[NONCE_SPEC, var(REQUEST_ID), var(KEY_ID), HMAC_SPEC];
    const REFRESH_RESP: &[FieldSpec] = &[
        NONCE_SPEC,
        var(REQUEST_ID),
        var(KEY_ENTRY),
        var(KEY_ID),
        fixed(TTL, 4),
        HMAC_SPEC,
    ];
    const ERROR: &[FieldSpec] = &[var(ERROR_TEXT)];
    match t {
        MsgType::ProvReq => PROV_REQ,
        MsgType::ProvResp => PROV_RESP,
        MsgType::LicReq => LIC_REQ,
        MsgType::LicResp => LIC_RESP,
        MsgType::RefreshReq => REFRESH_REQ,
        MsgType::RefreshResp => REFRESH_RESP,
        MsgType::Error => ERROR,
    }
}

const ENTRY_SCHEMA: &[FieldSpec] = &[
    var(entry_tag::KEY_ID),
    fixed(entry_tag::IV, 16),
    var(entry_tag::ENC_KEY),
    fixed(entry_tag::KCB, 16),
    fixed(entry_tag::KCB_ENCRYPTED, 1),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    pub tag: u16,
    pub value: Vec<u8>,
}

impl Field {
    pub fn new(tag: u16, value: impl Into<Vec<u8>>) -> Field {
        Field { tag, value: value.into() }
    }
}

/// A message type plus its ordered TLV fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub fields: Vec<Field>,
}

pub(crate) fn encode_fields(out: &mut Vec<u8>, fields: &[Field]) {
    for f in fields {
        out.extend_from_slice(&f.tag.to_be_bytes());
        out.extend_from_slice(&(f.value.len() as u32).to_be_bytes());
        out.extend_from_slice(&f.value);
    }
}

fn parse_fields(mut buf: &[u8]) -> Result<Vec<Field>, Malformed> {
    let mut fields = Vec::new();
    while !buf.is_empty() {
        if buf.len() < FIELD_HEADER_LEN {
            return Err(Malformed::Truncated);
        }
        let tag = u16::from_be_bytes([buf[0], buf[1]]);
        let len = u32::from_be_bytes(buf[2..6].try_into().unwrap()) as usize;
        buf = &buf[FIELD_HEADER_LEN..];
        if buf.len() < len {
            return Err(Malformed::Truncated);
        }
        fields.push(Field::new(tag, &buf[..len]));
        buf = &buf[len..];
    }
    Ok(fields)
}

/// Ascending tags; repeats only where the schema allows; the HMAC tag, when
/// present, closes the list.
fn check_fields(fields: &[Field], schema: &[FieldSpec]) -> Result<(), Malformed> {
    let mut prev: Option<u16> = None;
    for f in fields {
        let spec = schema
            .iter()
            .find(|s| s.tag == f.tag)
            .ok_or(Malformed::UnknownTag(f.tag))?;
        if let Len::Fixed(n) = spec.len {
            if f.value.len() != n {
                return Err(Malformed::FieldLength { tag: f.tag, expected: n, actual: f.value.len() });
            }
        }
        if let Some(p) = prev {
            if p == tag::HMAC_TAG {
                return Err(Malformed::MacNotLast);
            }
            let ordered = f.tag == tag::HMAC_TAG || f.tag > p || (f.tag == p && spec.repeatable);
            if !ordered {
                return Err(Malformed::TagOrder { prev: p, tag: f.tag });
            }
        }
        prev = Some(f.tag);
    }
    Ok(())
}

impl Frame {
    pub fn new(msg_type: MsgType) -> Frame {
        Frame { msg_type, fields: Vec::new() }
    }

    pub fn with(mut self, tag: u16, value: impl Into<Vec<u8>>) -> Frame {
        self.fields.push(Field::new(tag, value));
        self
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            HEADER_LEN + self.fields.iter().map(|f| FIELD_HEADER_LEN + f.value.len()).sum::<usize>(),
        );
        out.extend_from_slice(&FRAME_MAGIC);
        out.push(self.msg_type as u8);
        encode_fields(&mut out, &self.fields);
        out
    }

    /// Parses and checks canonical form against the message type's schema.
    pub fn decode(bytes: &[u8]) -> Result<Frame, WireError> {
        if bytes.len() < HEADER_LEN {
            return Err(Malformed::Truncated.into());
        }
        if bytes[..FRAME_MAGIC.len()] != FRAME_MAGIC {
            return Err(Malformed::BadMagic.into());
        }
        let raw_type = bytes[FRAME_MAGIC.len()];
        let msg_type = MsgType::from_u8(raw_type).ok_or(WireError::UnknownMsgType(raw_type))?;
        let fields = parse_fields(&bytes[HEADER_LEN..])?;
        check_fields(&fields, schema(msg_type))?;
        Ok(Frame { msg_type, fields })
    }

    pub fn get(&self, tag: u16) -> Option<&[u8]> {
        self.fields.iter().find(|f| f.tag == tag).map(|f| f.value.as_slice())
    }

    pub fn require(&self, tag: u16) -> Result<&[u8], Malformed> {
        self.get(tag).ok_or(Malformed::MissingField(tag))
    }

    pub fn get_all(&self, tag: u16) -> impl Iterator<Item = &[u8]> {
        self.fields.iter().filter(move |f| f.tag == tag).map(|f| f.value.as_slice())
    }
}

/// Nested key-entry body: a bare field list with the entry tag set.
pub(crate) fn decode_entry_fields(bytes: &[u8]) -> Result<Vec<Field>, Malformed> {
    let fields = parse_fields(bytes)?;
    check_fields(&fields, ENTRY_SCHEMA)?;
    Ok(fields)
}

/// Splits a frame into the bytes covered by its trailing HMAC field and the
/// tag itself. Returns `None` when the frame does not end in an HMAC field.
pub fn split_mac_trailer(bytes: &[u8]) -> Option<(&[u8], &[u8; 32])> {
    if bytes.len() < HEADER_LEN + MAC_FIELD_LEN {
        return None;
    }
    let (body, trailer) = bytes.split_at(bytes.len() - MAC_FIELD_LEN);
    if trailer[..2] != tag::HMAC_TAG.to_be_bytes() || trailer[2..6] != 32u32.to_be_bytes() {
        return None;
    }
    Some((body, trailer[FIELD_HEADER_LEN..].try_into().unwrap()))
}
