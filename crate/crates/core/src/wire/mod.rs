//! Canonical binary encoding for every protocol message.
//!
//! A frame is `"WVSIM1"` ‖ message type (1 byte) ‖ fields, each field being
//! tag (u16) ‖ length (u32) ‖ value, all big-endian. Tags appear in strictly
//! ascending order (key entries in a license response may repeat); the HMAC
//! tag field, when present, always comes last and covers every byte before it.
//!
//! On a byte stream each frame is preceded by its length as a big-endian u32.

mod frame;
mod message;

pub use frame::{
    entry_tag, split_mac_trailer, tag, Field, Frame, Malformed, MsgType, WireError, FRAME_MAGIC,
    HEADER_LEN, MAC_FIELD_LEN,
};
pub use message::{
    ErrorMessage, KeyEntry, LicenseRequest, LicenseResponse, Message, ProvisioningRequest,
    ProvisioningResponse, RefreshRequest, RefreshResponse,
};
