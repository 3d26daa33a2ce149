//! Device description mixed into license-phase key derivation.

/// Each field is encoded as a big-endian u32 length followed by its bytes,
/// in the order model, arch, cdm version, build.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceInfo {
    pub model: String,
    pub arch: String,
    pub cdm_version: String,
    pub build: String,
}

impl Default for DeviceInfo {
    fn default() -> Self {
        DeviceInfo {
            model: "wvsim-device".into(),
            arch: std::env::consts::ARCH.into(),
            cdm_version: crate::API_VERSION.into(),
            build: "sim".into(),
        }
    }
}

impl DeviceInfo {
    pub fn blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for field in [&self.model, &self.arch, &self.cdm_version, &self.build] {
            out.extend_from_slice(&(field.len() as u32).to_be_bytes());
            out.extend_from_slice(field.as_bytes());
        }
        out
    }
}
