use std::io::{self, Write as _};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use wvsim_core::cdm::{DeviceQuery, Subsample};
use wvsim_core::client::{self, Client};
use wvsim_core::server::{repeating_plan, ServerError};
use wvsim_core::trace::{hex_prefix, TraceLine};
use wvsim_core::transport::{self, Endpoint, InProcess, TcpEndpoint};
use wvsim_core::wire::{tag, Frame, Message, FRAME_MAGIC};
use wvsim_core::{ladder, Cdm, CdmConfig, Cdn, Clock, Keybox, ScriptedClock, Server, ServerConfig, SystemClock};

use crate::config::{register_keybox, ClockMode, RunConfig};
use crate::CliError;

/// Plan used when no sidecar is given: 16 clear bytes, then 4080 protected.
const DEFAULT_CLEAR: usize = 16;
const DEFAULT_PROTECTED: usize = 4080;
const DEFAULT_LISTEN: &str = "127.0.0.1:7000";

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

fn write(path: &Path, data: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, data).map_err(|e| CliError::io(path, e))
}

fn read_optional(path: &Path) -> Result<Option<Vec<u8>>, CliError> {
    match std::fs::read(path) {
        Ok(data) => Ok(Some(data)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(CliError::io(path, e)),
    }
}

fn load_keybox(path: &Path) -> Result<Keybox, CliError> {
    Keybox::parse(&read(path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn build_server(cfg: &RunConfig) -> Result<Server, CliError> {
    let keyboxes = cfg.server_keyboxes.iter().map(|p| load_keybox(p)).collect::<Result<_, _>>()?;
    Server::new(ServerConfig {
        seed: cfg.seed.map(|s| s.wrapping_add(1)),
        rotate_server_mac_key: cfg.rotate_server_mac_key,
        content_keys: cfg.content_keys.clone(),
        keyboxes,
        state_dir: cfg.state_dir.clone(),
    })
    .map_err(|e| match (e, &cfg.state_dir) {
        (ServerError::Io(source), Some(dir)) => CliError::io(dir, source),
        (e, _) => CliError::Config(format!("server state: {e}")),
    })
}

fn device(cfg: &RunConfig) -> Result<(Cdm, Keybox), CliError> {
    let path = cfg.keybox.as_deref().ok_or_else(|| CliError::Config("client.keybox is not set".into()))?;
    let keybox = load_keybox(path)?;
    let clock: Arc<dyn Clock> = match cfg.clock {
        ClockMode::Real => Arc::new(SystemClock::new()),
        ClockMode::Scripted => Arc::new(ScriptedClock::new()),
    };
    let cdm = Cdm::new(CdmConfig { seed: cfg.seed, ..CdmConfig::default() }, Some(keybox.clone()), clock);
    cdm.is_keybox_valid().map_err(|e| CliError::Protocol(format!("keybox check: {e}")))?;
    Ok((cdm, keybox))
}

fn endpoint(cfg: &RunConfig) -> Result<Box<dyn Endpoint>, CliError> {
    Ok(match &cfg.endpoint {
        None => Box::new(InProcess(Arc::new(build_server(cfg)?))),
        Some(addr) => Box::new(TcpEndpoint::connect(addr).map_err(|e| CliError::io(Path::new(addr), e))?),
    })
}

fn client<'a>(cfg: &RunConfig, cdm: &'a Cdm, keybox: &Keybox) -> Result<Client<'a, Box<dyn Endpoint>>, CliError> {
    Ok(Client {
        cdm,
        endpoint: endpoint(cfg)?,
        storage_key: ladder::storage_key(keybox),
        device_blob: cfg.device.blob(),
        scheme: cfg.scheme,
    })
}

/// Runs `body`, then writes the trace whatever the outcome.
fn with_trace<T>(cfg: &RunConfig, cdm: &Cdm, body: impl FnOnce() -> Result<T, CliError>) -> Result<T, CliError> {
    let result = body();
    cdm.terminate();
    if let Some(path) = &cfg.trace {
        let mut text = cdm.trace_lines().join("\n");
        text.push('\n');
        write(path, text.as_bytes())?;
    }
    result
}

fn cdm_step<T>(what: &str, r: Result<T, wvsim_core::CdmError>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Protocol(format!("{what}: {e}")))
}

/// Loads the stored credential or provisions a new one and stores it.
fn ensure_credential<E: Endpoint>(
    cfg: &RunConfig,
    client: &mut Client<'_, E>,
    sid: wvsim_core::SessionId,
) -> Result<Vec<u8>, CliError> {
    let stored = match &cfg.credential {
        Some(path) => read_optional(path)?,
        None => None,
    };
    let (credential, fresh) = client.ensure_credential(sid, stored.as_deref())?;
    if fresh {
        log::info!("device provisioned");
        if let Some(path) = &cfg.credential {
            write(path, &credential)?;
        }
    }
    Ok(credential)
}

fn plan_for(input: &Path, plan: Option<&Path>, len: usize) -> Result<Vec<Subsample>, CliError> {
    let sidecar = PathBuf::from(format!("{}.plan", input.display()));
    let path = match plan {
        Some(p) => Some(p.to_path_buf()),
        None => sidecar.is_file().then_some(sidecar),
    };
    match path {
        Some(p) => {
            let text = String::from_utf8(read(&p)?)
                .map_err(|_| CliError::Config(format!("{}: plan is not text", p.display())))?;
            client::parse_plan(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
        }
        None => Ok(repeating_plan(len, DEFAULT_CLEAR, DEFAULT_PROTECTED)),
    }
}

pub fn gen_keybox(out: &Path, seed: Option<u64>, register: Option<&Path>) -> Result<(), CliError> {
    let keybox = match seed {
        Some(s) => Keybox::generate(&mut ChaCha20Rng::seed_from_u64(s)),
        None => Keybox::generate(&mut rand::rngs::OsRng),
    }
    .map_err(|e| CliError::Protocol(e.to_string()))?;
    write(out, &keybox.to_bytes())?;
    if let Some(config) = register {
        let absolute = std::path::absolute(out).map_err(|e| CliError::io(out, e))?;
        let config_abs = std::path::absolute(config).map_err(|e| CliError::io(config, e))?;
        register_keybox(&config_abs, &absolute)?;
    }
    println!("device_id {}", hex::encode(keybox.device_id));
    Ok(())
}

pub fn validate(path: &Path) -> Result<(), CliError> {
    let raw = read(path)?;
    let keybox = Keybox::parse(&raw).map_err(|e| CliError::Protocol(format!("invalid: {e}")))?;
    match keybox.validate() {
        wvsim_core::keybox::Verdict::Ok => {
            println!("OK device_id {}", hex::encode(keybox.device_id));
            Ok(())
        }
        verdict => Err(CliError::Protocol(format!("invalid: {verdict:?}"))),
    }
}

pub struct E2eArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    pub plan: Option<PathBuf>,
    pub key_id: Option<String>,
    pub encrypted: Option<PathBuf>,
}

pub fn e2e(cfg: &RunConfig, args: &E2eArgs) -> Result<(), CliError> {
    let ids = cfg.license_key_ids();
    let key_id = match &args.key_id {
        Some(k) => k.as_bytes().to_vec(),
        None => ids.first().cloned().ok_or_else(|| CliError::Config("no content keys configured".into()))?,
    };
    let plaintext = read(&args.input)?;
    let plan = plan_for(&args.input, args.plan.as_deref(), plaintext.len())?;
    let (cdm, keybox) = device(cfg)?;
    let mut client = client(cfg, &cdm, &keybox)?;

    with_trace(cfg, &cdm, || {
        let sid = cdm_step("open session", cdm.open_session())?;
        ensure_credential(cfg, &mut client, sid)?;
        let license = client.license(sid, &ids)?;
        log::info!("license {} loaded {} keys", hex::encode(&license.request_id), license.keys_loaded);

        let mut cdn = Cdn::new(&cfg.content_keys, cfg.seed.map(|s| s.wrapping_add(2)));
        let package = cdn
            .encrypt_content(&key_id, &plaintext, &plan)
            .map_err(|e| CliError::Config(format!("packaging: {e}")))?;
        if let Some(path) = &args.encrypted {
            write(path, &package.data)?;
        }
        let decrypted = client.decrypt(sid, &package)?;
        cdm_step("close session", cdm.close_session(sid))?;
        write(&args.output, &decrypted)?;
        if decrypted != plaintext {
            return Err(CliError::Protocol("decrypted output differs from the input".into()));
        }
        println!("decrypted {} bytes in {} subsamples", decrypted.len(), package.subsamples.len());
        Ok(())
    })
}

pub fn generic_session(cfg: &RunConfig, payload_path: &Path) -> Result<(), CliError> {
    let generic_id = cfg
        .generic_key_id
        .clone()
        .ok_or_else(|| CliError::Config("client.generic_key_id is not set".into()))?;
    let content_ids: Vec<Vec<u8>> = cfg.license_key_ids().into_iter().filter(|id| *id != generic_id).collect();
    let content_id = content_ids
        .first()
        .cloned()
        .ok_or_else(|| CliError::Config("a content key besides the generic key is required".into()))?;
    let payload = read(payload_path)?;
    let (cdm, keybox) = device(cfg)?;
    let mut client = client(cfg, &cdm, &keybox)?;

    with_trace(cfg, &cdm, || {
        // License session: content keys and CENC decryption only.
        let media = cdm_step("open session", cdm.open_session())?;
        let credential = ensure_credential(cfg, &mut client, media)?;
        client.license(media, &content_ids)?;
        let mut cdn = Cdn::new(&cfg.content_keys, cfg.seed.map(|s| s.wrapping_add(2)));
        let plan = repeating_plan(payload.len(), DEFAULT_CLEAR, DEFAULT_PROTECTED);
        let package = cdn
            .encrypt_content(&content_id, &payload, &plan)
            .map_err(|e| CliError::Config(format!("packaging: {e}")))?;
        if client.decrypt(media, &package)? != payload {
            return Err(CliError::Protocol("license session decrypted the wrong bytes".into()));
        }

        // Generic crypto session: its own license for the generic key.
        let generic = cdm_step("open session", cdm.open_session())?;
        client.load_credential(generic, &credential)?;
        client.license(generic, std::slice::from_ref(&generic_id))?;
        let iv: [u8; 16] = cdm_step("random IV", cdm.query_device_info(DeviceQuery::Random(16)))?
            .try_into()
            .expect("16 bytes");
        let outcome = client::generic_round_trip(&cdm, generic, &generic_id, &payload, &iv)?;
        cdm_step("close session", cdm.close_session(generic))?;
        cdm_step("close session", cdm.close_session(media))?;
        if outcome.decrypted != payload || !outcome.verified {
            return Err(CliError::Protocol("generic round trip did not reproduce the payload".into()));
        }
        println!(
            "generic: encrypted {} -> {} bytes, tag {}, verified",
            payload.len(),
            outcome.ciphertext.len(),
            hex::encode(outcome.tag)
        );
        Ok(())
    })
}

pub fn serve(cfg: &RunConfig, listen: Option<String>) -> Result<(), CliError> {
    let server = Arc::new(build_server(cfg)?);
    let addr = listen.or_else(|| cfg.listen.clone()).unwrap_or_else(|| DEFAULT_LISTEN.to_string());
    let listener = TcpListener::bind(&addr).map_err(|e| CliError::io(Path::new(&addr), e))?;
    let local = listener.local_addr().map_err(|e| CliError::io(Path::new(&addr), e))?;
    println!("listening on {local}");
    io::stdout().flush().ok();
    transport::serve(listener, server, Arc::new(AtomicBool::new(false))).map_err(|e| CliError::io(Path::new(&addr), e))
}

fn tag_name(t: u16) -> &'static str {
    match t {
        tag::NONCE => "nonce",
        tag::DEVICE_ID => "device_id",
        tag::PROVISIONING_TOKEN => "provisioning_token",
        tag::DEVICE_BLOB => "device_blob",
        tag::REQUEST_ID => "request_id",
        tag::IV => "iv",
        tag::CIPHERTEXT => "ciphertext",
        tag::HMAC_TAG => "hmac_tag",
        tag::RSA_SIGNATURE => "rsa_signature",
        tag::SIG_SCHEME => "sig_scheme",
        tag::ENC_SESSION_KEY => "enc_session_key",
        tag::KEY_ENTRY => "key_entry",
        tag::NEW_SERVER_MAC_KEY_CT => "new_server_mac_key",
        tag::KEY_ID => "key_id",
        tag::TTL => "ttl",
        tag::ERROR_TEXT => "error_text",
        _ => "?",
    }
}

pub fn trace_dump(path: &Path) -> Result<(), CliError> {
    let data = read(path)?;
    if data.starts_with(&FRAME_MAGIC) {
        let frame = Frame::decode(&data).map_err(|e| CliError::Protocol(format!("{}: {e}", path.display())))?;
        println!("{} ({}) {} bytes", frame.msg_type.name(), frame.msg_type as u8, data.len());
        for f in &frame.fields {
            println!("  {:#06x} {:<20} len={:<5} {}", f.tag, tag_name(f.tag), f.value.len(), hex_prefix(&f.value));
        }
        Message::decode(&data).map_err(|e| CliError::Protocol(format!("{}: {e}", path.display())))?;
        return Ok(());
    }
    let text = String::from_utf8(data)
        .map_err(|_| CliError::Protocol(format!("{}: neither a frame nor a trace", path.display())))?;
    let mut bad = 0;
    let mut failures = 0;
    let mut count = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match TraceLine::parse(line) {
            Some(t) => {
                count += 1;
                failures += usize::from(!t.ok);
                let session = t.session.map_or("-".to_string(), |s| format!("{s:08x}"));
                println!("{} {:<26} {:>8} {}", t.symbol, t.name, session, if t.ok { "ok" } else { "FAILED" });
            }
            None => bad += 1,
        }
    }
    println!("{count} calls, {failures} failed");
    if bad > 0 {
        return Err(CliError::Protocol(format!("{bad} lines are not trace records")));
    }
    Ok(())
}
