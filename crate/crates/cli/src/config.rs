//! Run configuration: one TOML file plus environment overrides for paths.
//!
//! ```toml
//! seed = 42                       # optional; seeds every generator (deterministic mode)
//!
//! [client]
//! keybox = "device.kbox"          # WVSIM_KEYBOX
//! credential = "cert.bin"         # WVSIM_CREDENTIAL
//! trace = "trace.log"             # WVSIM_TRACE
//! endpoint = "in-process"         # or "host:port" of a `wvsim serve` listener
//! scheme = "pss"                  # or "pkcs1v15"
//! clock = "real"                  # or "scripted" (in-process only)
//! key_ids = ["video"]             # default: every content key
//! generic_key_id = "generic"      # used by `generic-session`
//!
//! [client.device]                 # fields of the license device blob
//! model = "wvsim-device"
//!
//! [server]
//! keyboxes = ["device.kbox"]      # devices known to the provisioning server
//! state_dir = "server-state"      # issued device keys are kept here
//! rotate_server_mac_key = false
//! listen = "127.0.0.1:7000"
//!
//! [[content_keys]]
//! key_id = "video"
//! key = "000102030405060708090a0b0c0d0e0f"
//! rights = ["content_decrypt"]    # also generic_encrypt, generic_decrypt,
//! ttl = 0                         #   generic_sign, generic_verify, anti_rollback
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use wvsim_core::crypto::SignatureScheme;
use wvsim_core::device::DeviceInfo;
use wvsim_core::{ContentKeySpec, ControlBits};

use crate::CliError;

pub const IN_PROCESS: &str = "in-process";

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    #[serde(default)]
    client: ClientSection,
    #[serde(default)]
    server: ServerSection,
    #[serde(default)]
    content_keys: Vec<KeySection>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ClientSection {
    keybox: Option<PathBuf>,
    credential: Option<PathBuf>,
    trace: Option<PathBuf>,
    endpoint: Option<String>,
    #[serde(default)]
    scheme: Scheme,
    #[serde(default)]
    clock: ClockMode,
    #[serde(default)]
    key_ids: Vec<String>,
    generic_key_id: Option<String>,
    device: Option<DeviceSection>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct DeviceSection {
    model: Option<String>,
    arch: Option<String>,
    cdm_version: Option<String>,
    build: Option<String>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ServerSection {
    #[serde(default)]
    keyboxes: Vec<PathBuf>,
    state_dir: Option<PathBuf>,
    #[serde(default)]
    rotate_server_mac_key: bool,
    listen: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeySection {
    key_id: String,
    key: String,
    #[serde(default)]
    rights: Vec<Right>,
    #[serde(default)]
    ttl: u32,
}

#[derive(Debug, Clone, Copy, Deserialize, Default, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum Scheme {
    #[default]
    Pss,
    Pkcs1v15,
}

#[derive(Debug, Clone, Copy, Deserialize, Default, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    #[default]
    Real,
    Scripted,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Right {
    ContentDecrypt,
    GenericEncrypt,
    GenericDecrypt,
    GenericSign,
    GenericVerify,
    AntiRollback,
}

impl Right {
    fn bit(self) -> ControlBits {
        match self {
            Right::ContentDecrypt => ControlBits::ALLOW_CONTENT_DECRYPT,
            Right::GenericEncrypt => ControlBits::ALLOW_GENERIC_ENCRYPT,
            Right::GenericDecrypt => ControlBits::ALLOW_GENERIC_DECRYPT,
            Right::GenericSign => ControlBits::ALLOW_GENERIC_SIGN,
            Right::GenericVerify => ControlBits::ALLOW_GENERIC_VERIFY,
            Right::AntiRollback => ControlBits::ANTI_ROLLBACK_REQUIRED,
        }
    }
}

/// Fully resolved configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub keybox: Option<PathBuf>,
    pub credential: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    /// `None` means in-process servers.
    pub endpoint: Option<String>,
    pub scheme: SignatureScheme,
    pub clock: ClockMode,
    pub key_ids: Vec<Vec<u8>>,
    pub generic_key_id: Option<Vec<u8>>,
    pub device: DeviceInfo,
    pub server_keyboxes: Vec<PathBuf>,
    pub state_dir: Option<PathBuf>,
    pub rotate_server_mac_key: bool,
    pub listen: Option<String>,
    pub content_keys: Vec<ContentKeySpec>,
}

fn config_err(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {msg}", path.display()))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, |k| std::env::var_os(k).map(PathBuf::from)).map_err(|e| config_err(path, e))
    }

    /// Parses `text`; `env` supplies path overrides by variable name.
    pub fn parse(
        text: &str,
        base: &Path,
        env: impl Fn(&str) -> Option<PathBuf>,
    ) -> Result<RunConfig, String> {
        let file: FileConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        let pick = |var: &str, from_file: Option<PathBuf>| env(var).or(from_file.map(resolve));

        let content_keys = file
            .content_keys
            .into_iter()
            .map(|k| {
                let key = hex::decode(&k.key)
                    .ok()
                    .and_then(|v| <[u8; 16]>::try_from(v).ok())
                    .ok_or_else(|| format!("content key {:?}: key must be 32 hex digits", k.key_id))?;
                Ok(ContentKeySpec {
                    key_id: k.key_id.into_bytes(),
                    key,
                    control_bits: k.rights.iter().fold(ControlBits::empty(), |a, r| a | r.bit()),
                    ttl: k.ttl,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;

        let endpoint = match file.client.endpoint.as_deref() {
            None | Some(IN_PROCESS) => None,
            Some(addr) => Some(addr.to_string()),
        };
        if endpoint.is_some() && file.client.clock == ClockMode::Scripted {
            return Err("the scripted clock is only available with in-process servers".into());
        }

        let mut device = DeviceInfo::default();
        if let Some(d) = file.client.device {
            let set = |slot: &mut String, v: Option<String>| {
                if let Some(v) = v {
                    *slot = v;
                }
            };
            set(&mut device.model, d.model);
            set(&mut device.arch, d.arch);
            set(&mut device.cdm_version, d.cdm_version);
            set(&mut device.build, d.build);
        }

        Ok(RunConfig {
            seed: file.seed,
            keybox: pick("WVSIM_KEYBOX", file.client.keybox),
            credential: pick("WVSIM_CREDENTIAL", file.client.credential),
            trace: pick("WVSIM_TRACE", file.client.trace),
            endpoint,
            scheme: match file.client.scheme {
                Scheme::Pss => SignatureScheme::Pss,
                Scheme::Pkcs1v15 => SignatureScheme::Pkcs1v15,
            },
            clock: file.client.clock,
            key_ids: file.client.key_ids.into_iter().map(String::into_bytes).collect(),
            generic_key_id: file.client.generic_key_id.map(String::into_bytes),
            device,
            server_keyboxes: file.server.keyboxes.into_iter().map(resolve).collect(),
            state_dir: file.server.state_dir.map(resolve),
            rotate_server_mac_key: file.server.rotate_server_mac_key,
            listen: file.server.listen,
            content_keys,
        })
    }

    /// Key ids to license: the configured list, or every content key.
    pub fn license_key_ids(&self) -> Vec<Vec<u8>> {
        if self.key_ids.is_empty() {
            self.content_keys.iter().map(|k| k.key_id.clone()).collect()
        } else {
            self.key_ids.clone()
        }
    }
}

/// Adds `keybox` to the `[server] keyboxes` list of the config at `path`,
/// keeping the rest of the file as written.
pub fn register_keybox(path: &Path, keybox: &Path) -> Result<(), CliError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(CliError::io(path, e)),
    };
    let mut doc: toml_edit::DocumentMut = text.parse().map_err(|e| config_err(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let entry = keybox
        .strip_prefix(base)
        .ok()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(keybox)
        .to_string_lossy()
        .into_owned();
    let server = doc
        .entry("server")
        .or_insert_with(|| toml_edit::Item::Table(toml_edit::Table::new()))
        .as_table_mut()
        .ok_or_else(|| config_err(path, "`server` is not a table"))?;
    let list = server
        .entry("keyboxes")
        .or_insert_with(|| toml_edit::value(toml_edit::Array::new()))
        .as_array_mut()
        .ok_or_else(|| config_err(path, "`server.keyboxes` is not an array"))?;
    if !list.iter().any(|v| v.as_str() == Some(entry.as_str())) {
        list.push(entry);
    }
    std::fs::write(path, doc.to_string()).map_err(|e| CliError::io(path, e))
}
