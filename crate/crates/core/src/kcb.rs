//! Key control blocks: 16 bytes of per-key policy bound to a content key.
//!
//! Layout (big-endian): magic `"kctl"` ‖ nonce (u32) ‖ ttl seconds (u32) ‖ control bits (u32).

use bitflags::bitflags;
use thiserror::Error;

pub const KCB_LEN: usize = 16;
pub const KCB_MAGIC: [u8; 4] = *b"kctl";

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct ControlBits: u32 {
        const ALLOW_CONTENT_DECRYPT = 1 << 0;
        const ALLOW_GENERIC_ENCRYPT = 1 << 1;
        const ALLOW_GENERIC_DECRYPT = 1 << 2;
        const ALLOW_GENERIC_SIGN = 1 << 3;
        const ALLOW_GENERIC_VERIFY = 1 << 4;
        const NONCE_REQUIRED = 1 << 5;
        /// Accepted but not enforced by the simulator.
        const ANTI_ROLLBACK_REQUIRED = 1 << 6;

        const _ = !0;
    }
}

impl ControlBits {
    /// The five usage rights, in bit order.
    pub const RIGHTS: [ControlBits; 5] = [
        ControlBits::ALLOW_CONTENT_DECRYPT,
        ControlBits::ALLOW_GENERIC_ENCRYPT,
        ControlBits::ALLOW_GENERIC_DECRYPT,
        ControlBits::ALLOW_GENERIC_SIGN,
        ControlBits::ALLOW_GENERIC_VERIFY,
    ];
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KcbError {
    #[error("key control block must be {KCB_LEN} bytes, got {0}")]
    Length(usize),
    #[error("bad key control block magic {0:02x?}")]
    BadMagic([u8; 4]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyControlBlock {
    pub magic: [u8; 4],
    pub nonce: u32,
    pub ttl: u32,
    pub control_bits: ControlBits,
}

impl KeyControlBlock {
    pub fn new(nonce: u32, ttl: u32, control_bits: ControlBits) -> Self {
        KeyControlBlock {
            magic: KCB_MAGIC,
            nonce,
            ttl,
            control_bits,
        }
    }

    pub fn to_bytes(&self) -> [u8; KCB_LEN] {
        let mut out = [0u8; KCB_LEN];
        out[..4].copy_from_slice(&self.magic);
        out[4..8].copy_from_slice(&self.nonce.to_be_bytes());
        out[8..12].copy_from_slice(&self.ttl.to_be_bytes());
        out[12..].copy_from_slice(&self.control_bits.bits().to_be_bytes());
        out
    }

    /// Parses without checking the magic.
    pub fn from_bytes(raw: &[u8]) -> Result<Self, KcbError> {
        let raw: &[u8; KCB_LEN] = raw.try_into().map_err(|_| KcbError::Length(raw.len()))?;
        let word = |i: usize| u32::from_be_bytes(raw[i..i + 4].try_into().unwrap());
        Ok(KeyControlBlock {
            magic: raw[..4].try_into().unwrap(),
            nonce: word(4),
            ttl: word(8),
            control_bits: ControlBits::from_bits_retain(word(12)),
        })
    }

    /// Only `"kctl"` is accepted; versioned `kcXX` variants are rejected.
    pub fn verify_magic(&self) -> Result<(), KcbError> {
        if self.magic == KCB_MAGIC {
            Ok(())
        } else {
            Err(KcbError::BadMagic(self.magic))
        }
    }

    pub fn allows(&self, right: ControlBits) -> bool {
        self.control_bits.contains(right)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_magic_nonce_ttl_bits() {
        let kcb = KeyControlBlock::new(0x0102_0304, 300, ControlBits::ALLOW_CONTENT_DECRYPT | ControlBits::NONCE_REQUIRED);
        assert_eq!(
            hex::encode(kcb.to_bytes()),
            "6b63746c010203040000012c00000021"
        );
    }

    #[test]
    fn bad_magic_is_reported() {
        let mut kcb = KeyControlBlock::new(1, 0, ControlBits::empty());
        kcb.magic = *b"kct9";
        assert_eq!(kcb.verify_magic(), Err(KcbError::BadMagic(*b"kct9")));
    }

    #[test]
    fn wrong_length() {
        assert_eq!(KeyControlBlock::from_bytes(&[0; 15]), Err(KcbError::Length(15)));
    }

    proptest! {
        #[test]
        fn bytes_round_trip(raw in proptest::array::uniform16(any::<u8>())) {
            prop_assert_eq!(KeyControlBlock::from_bytes(&raw).unwrap().to_bytes(), raw);
        }
    }
}
