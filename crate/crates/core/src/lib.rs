//! A clean-room simulator of a hardware-DRM key ladder.
//!
//! The chain runs keybox → device RSA key → session keys → content keys →
//! media decryption:
//!
//! - [`keybox`] holds the 128-byte root of trust;
//! - [`ladder`] derives asset and MAC keys with AES-CMAC;
//! - [`cdm`] is the client state machine (sessions, nonces, key table);
//! - [`server`] mints device credentials and licenses and packages content;
//! - [`wire`] is the canonical message encoding, [`transport`] moves frames;
//! - [`client`] drives the three protocol phases against an endpoint.

pub mod cdm;
pub mod client;
pub mod clock;
pub mod crypto;
pub mod device;
pub mod kcb;
pub mod keybox;
pub mod ladder;
pub mod nonce;
pub mod server;
pub mod trace;
pub mod transport;
pub mod wire;

#[cfg(any(test, feature = "testkit"))]
pub mod testkit;

pub use cdm::{Cdm, CdmConfig, CdmError, SessionId, Subsample};
pub use clock::{Clock, ScriptedClock, SystemClock};
pub use kcb::{ControlBits, KeyControlBlock};
pub use keybox::Keybox;
pub use server::{Cdn, ContentKeySpec, Server, ServerConfig};

/// Reported by the `APIVersion` query and used as the default CDM version.
pub const API_VERSION: &str = "wvsim-16";
