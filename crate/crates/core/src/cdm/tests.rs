use std::time::Duration;

use aes::cipher::{BlockEncrypt, KeyInit};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use super::*;
use crate::testkit::{all_rights, spec, world, world_with, World};
use crate::wire::{LicenseResponse, RefreshResponse};

type KeySnapshot = Vec<(Vec<u8>, AesKey, [u8; 16], Duration)>;

fn key_table(w: &World, sid: SessionId) -> KeySnapshot {
    w.cdm.lock().sessions[&sid]
        .keys
        .values()
        .map(|e| (e.key_id.clone(), e.key, e.kcb.to_bytes(), e.loaded_at))
        .collect()
}

fn live_nonces(w: &World, sid: SessionId) -> usize {
    w.cdm.lock().sessions[&sid].nonces.len()
}

/// HMAC-SHA256 written out from the hash, independent of the `hmac` crate.
fn hmac_oracle(key: &[u8], msg: &[u8]) -> [u8; 32] {
    let mut k = [0u8; 64];
    if key.len() > 64 {
        k[..32].copy_from_slice(&Sha256::digest(key));
    } else {
        k[..key.len()].copy_from_slice(key);
    }
    let inner = Sha256::new()
        .chain_update(k.map(|b| b ^ 0x36))
        .chain_update(msg)
        .finalize();
    Sha256::new()
        .chain_update(k.map(|b| b ^ 0x5c))
        .chain_update(inner)
        .finalize()
        .into()
}

/// AES-CTR from raw block encryptions with a big-endian 128-bit counter.
fn ctr_oracle(key: &AesKey, iv: &Iv, data: &[u8]) -> Vec<u8> {
    let cipher = aes::Aes128::new(key.into());
    let mut counter = u128::from_be_bytes(*iv);
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(16) {
        let mut block = counter.to_be_bytes().into();
        cipher.encrypt_block(&mut block);
        out.extend(chunk.iter().zip(block.iter()).map(|(a, b)| a ^ b));
        counter = counter.wrapping_add(1);
    }
    out
}

fn sign(mut msg: Message, key: &[u8]) -> Vec<u8> {
    let tag = crypto::hmac_sha256(key, &msg.signed_body());
    match &mut msg {
        Message::ProvisioningResponse(r) => r.mac = tag,
        Message::LicenseResponse(r) => r.mac = tag,
        Message::RefreshResponse(r) => r.mac = tag,
        _ => unreachable!(),
    }
    msg.encode()
}

fn spec_key(w: &World, id: &[u8]) -> AesKey {
    w.specs.iter().find(|s| s.key_id == id).unwrap().key
}

/// Provisioned session with the session key derived, plus the (unloaded)
/// license response the server produced.
fn pending_license(w: &World) -> (SessionId, LicenseResponse) {
    let (sid, _) = w.provisioned();
    let ids: Vec<Vec<u8>> = w.specs.iter().map(|s| s.key_id.clone()).collect();
    let raw = w.client().request_license(sid, &ids).unwrap();
    let Ok(Message::LicenseResponse(resp)) = Message::decode(&raw) else { panic!() };
    w.cdm.derive_keys_from_session_key(sid, &resp.enc_session_key, &w.device_blob).unwrap();
    (sid, resp)
}

fn mac_server_key(w: &World, sid: SessionId) -> [u8; 32] {
    w.cdm.derived_keys(sid).unwrap().mac_server_key
}

fn basic() -> World {
    world(vec![spec("video", all_rights(), 0), spec("audio", all_rights(), 0)])
}

// --- sessions ----------------------------------------------------------

#[test]
fn closed_session_is_unknown() {
    let w = basic();
    let sid = w.cdm.open_session().unwrap();
    w.cdm.close_session(sid).unwrap();
    assert!(matches!(w.cdm.select_key(sid, b"video"), Err(CdmError::UnknownSession)));
    assert!(matches!(w.cdm.close_session(sid), Err(CdmError::UnknownSession)));
}

#[test]
fn sixteen_sessions_then_too_many() {
    let w = basic();
    assert_eq!(w.cdm.max_sessions(), 16);
    let ids: Vec<_> = (0..16).map(|_| w.cdm.open_session().unwrap()).collect();
    assert!(matches!(w.cdm.open_session(), Err(CdmError::TooManySessions)));
    assert_eq!(w.cdm.open_session_count(), 16);
    w.cdm.close_session(ids[3]).unwrap();
    assert!(w.cdm.open_session().is_ok());
}

#[test]
fn session_ids_are_distinct() {
    let w = basic();
    assert_ne!(w.cdm.open_session().unwrap(), w.cdm.open_session().unwrap());
}

// --- nonces ------------------------------------------------------------

#[test]
fn twenty_first_nonce_in_a_second_is_rate_limited() {
    let w = basic();
    let sid = w.cdm.open_session().unwrap();
    for _ in 0..20 {
        w.cdm.generate_nonce(sid).unwrap();
    }
    assert!(matches!(w.cdm.generate_nonce(sid), Err(CdmError::RateLimited)));
    w.clock.advance(Duration::from_secs(1));
    w.cdm.generate_nonce(sid).unwrap();
}

#[test]
fn seventeenth_nonce_evicts_the_license_nonce() {
    let w = basic();
    let (sid, _) = w.provisioned();
    let mut client = w.client();
    let raw = client.request_license(sid, &[b"video".to_vec()]).unwrap();
    for _ in 0..16 {
        w.clock.advance(Duration::from_millis(200));
        w.cdm.generate_nonce(sid).unwrap();
    }
    let err = client.accept_license(sid, &raw).unwrap_err();
    assert!(matches!(err.cdm_error(), Some(CdmError::StaleNonce)), "{err}");
    assert!(key_table(&w, sid).is_empty());
}

#[test]
fn nonce_kept_while_fewer_than_seventeen() {
    let w = basic();
    let (sid, _) = w.provisioned();
    let mut client = w.client();
    let raw = client.request_license(sid, &[b"video".to_vec()]).unwrap();
    for _ in 0..15 {
        w.clock.advance(Duration::from_millis(200));
        w.cdm.generate_nonce(sid).unwrap();
    }
    assert_eq!(client.accept_license(sid, &raw).unwrap().keys_loaded, 1);
}

// --- provisioning ------------------------------------------------------

#[test]
fn hmac_oracle_matches_published_vector() {
    let tag = hmac_oracle(&[0x0b; 20], b"Hi There");
    assert_eq!(hex::encode(tag), "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7");
}

#[test]
fn generate_signature_is_hmac_under_client_key() {
    let w = basic();
    let sid = w.cdm.open_session().unwrap();
    assert!(matches!(w.cdm.generate_signature(sid, b"x"), Err(CdmError::NoDerivedKeys)));
    w.cdm.generate_derived_keys(sid).unwrap();
    let keys = w.cdm.derived_keys(sid).unwrap();
    for msg in [&b""[..], b"Hi There", &[0xa5; 300]] {
        let tag = w.cdm.generate_signature(sid, msg).unwrap();
        assert_eq!(tag, hmac_oracle(&keys.mac_client_key, msg));
        assert_ne!(tag, hmac_oracle(&keys.mac_server_key, msg));
    }
}

#[test]
fn same_keybox_gives_same_derived_keys() {
    let w = basic();
    let a = w.cdm.open_session().unwrap();
    let b = w.cdm.open_session().unwrap();
    w.cdm.generate_derived_keys(a).unwrap();
    w.cdm.generate_derived_keys(b).unwrap();
    assert_eq!(w.cdm.derived_keys(a), w.cdm.derived_keys(b));
}

#[test]
fn differing_tokens_give_differing_derived_keys() {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    for _ in 0..100 {
        let kb = Keybox::generate(&mut rng).unwrap();
        let mut other = kb.clone();
        rng.fill_bytes(&mut other.provisioning_token);
        let keys = |kb: Keybox| {
            let cdm = Cdm::new(CdmConfig::default(), Some(kb), Arc::new(crate::clock::ScriptedClock::new()));
            let sid = cdm.open_session().unwrap();
            cdm.generate_derived_keys(sid).unwrap();
            cdm.derived_keys(sid).unwrap()
        };
        let (x, y) = (keys(kb), keys(other));
        assert_ne!(x.asset_key, y.asset_key);
        assert_ne!(x.mac_client_key, y.mac_client_key);
        assert_ne!(x.mac_server_key, y.mac_server_key);
    }
}

#[test]
fn rewrap_round_trip_matches_server_record() {
    let w = basic();
    let (sid, cred) = w.provisioned();
    let sid2 = w.cdm.open_session().unwrap();
    w.cdm.load_device_rsa_key(sid2, &cred, &w.storage_key()).unwrap();
    let cert = w.server.device_cert(&w.keybox.device_id).unwrap();
    assert_eq!(w.cdm.rsa_modulus(sid2).unwrap(), cert.n().to_bytes_be());
    assert_eq!(w.cdm.rsa_modulus(sid).unwrap(), cert.n().to_bytes_be());
}

#[test]
fn replayed_provisioning_response_is_stale() {
    let w = basic();
    let sid = w.cdm.open_session().unwrap();
    let mut client = w.client();
    client.provision(sid).unwrap();
    let raw = client.endpoint.last_response().unwrap().to_vec();
    let err = w.cdm.rewrap_device_rsa_key(sid, &raw, &w.storage_key()).unwrap_err();
    assert!(matches!(err, CdmError::StaleNonce), "{err}");
}

#[test]
fn flipped_provisioning_ciphertext_is_bad_mac() {
    let w = basic();
    let sid = w.cdm.open_session().unwrap();
    let nonce = w.cdm.generate_nonce(sid).unwrap();
    w.cdm.generate_derived_keys(sid).unwrap();
    let req = crate::wire::ProvisioningRequest {
        nonce,
        device_id: w.keybox.device_id,
        provisioning_token: w.keybox.provisioning_token,
        request_id: vec![1; 16],
        mac: [0; 32],
    };
    let mut req = req;
    req.mac = w.cdm.generate_signature(sid, &Message::from(req.clone()).signed_body()).unwrap();
    let resp = w.server.handle_provisioning_request(&req).unwrap();
    let raw = Message::from(resp.clone()).encode();
    // header, nonce field, IV field, ciphertext field header
    let ct_start = crate::wire::HEADER_LEN + (6 + 4) + (6 + 16) + 6;
    assert_eq!(&raw[ct_start..ct_start + resp.ciphertext.len()], &resp.ciphertext[..]);
    let mut rng = ChaCha20Rng::seed_from_u64(64);
    for _ in 0..64 {
        let bit = rng.gen_range(0..resp.ciphertext.len() * 8);
        let mut bad = raw.clone();
        bad[ct_start + bit / 8] ^= 1 << (bit % 8);
        let err = w.cdm.rewrap_device_rsa_key(sid, &bad, &w.storage_key()).unwrap_err();
        assert!(matches!(err, CdmError::BadServerMac), "{err}");
    }
    assert!(w.cdm.lock().sessions[&sid].nonces.contains(nonce));
    w.cdm.rewrap_device_rsa_key(sid, &raw, &w.storage_key()).unwrap();
}

#[test]
fn rewrap_reports_padding_and_key_errors() {
    let w = basic();
    let sid = w.cdm.open_session().unwrap();
    w.cdm.generate_derived_keys(sid).unwrap();
    let keys = w.cdm.derived_keys(sid).unwrap();
    let iv = [9u8; 16];
    let craft = |ciphertext: Vec<u8>| {
        let nonce = w.cdm.generate_nonce(sid).unwrap();
        sign(
            crate::wire::ProvisioningResponse { nonce, iv, ciphertext, mac: [0; 32] }.into(),
            &keys.mac_server_key,
        )
    };
    // Valid padding, not a key.
    let raw = craft(crypto::cbc_encrypt(&keys.asset_key, &iv, b"definitely not pkcs8"));
    assert!(matches!(w.cdm.rewrap_device_rsa_key(sid, &raw, &[0; 16]), Err(CdmError::MalformedKey)));
    // Last block decrypts to garbage padding.
    let mut ct = crypto::cbc_encrypt(&keys.asset_key, &iv, &[7u8; 40]);
    let n = ct.len();
    ct[n - 17] ^= 0x55;
    let raw = craft(ct);
    assert!(matches!(w.cdm.rewrap_device_rsa_key(sid, &raw, &[0; 16]), Err(CdmError::BadPadding)));
}

#[test]
fn missing_trailer_is_bad_mac() {
    let w = basic();
    let sid = w.cdm.open_session().unwrap();
    w.cdm.generate_derived_keys(sid).unwrap();
    let err = w.cdm.rewrap_device_rsa_key(sid, b"WVSIM1\x02", &[0; 16]).unwrap_err();
    assert!(matches!(err, CdmError::BadServerMac));
}

// --- device RSA key ----------------------------------------------------

#[test]
fn credential_errors() {
    let w = basic();
    let (_, cred) = w.provisioned();
    let sid = w.cdm.open_session().unwrap();
    let mut wrong = w.storage_key();
    wrong[0] ^= 1;
    assert!(matches!(w.cdm.load_device_rsa_key(sid, &cred, &wrong), Err(CdmError::BadStorageMac)));
    assert!(matches!(
        w.cdm.load_device_rsa_key(sid, &cred[..cred.len() - 1], &w.storage_key()),
        Err(CdmError::MalformedKey)
    ));
    assert!(matches!(
        w.cdm.generate_rsa_signature(sid, b"m", SignatureScheme::Pss),
        Err(CdmError::NoRsaKey)
    ));
    w.cdm.load_device_rsa_key(sid, &cred, &w.storage_key()).unwrap();
    w.cdm.generate_rsa_signature(sid, b"m", SignatureScheme::Pss).unwrap();
}

#[test]
fn signature_schemes() {
    let w = basic();
    let (sid, _) = w.provisioned();
    let public = w.cdm.rsa_public_key(sid).unwrap();
    let msg = b"license request body";

    let pss1 = w.cdm.generate_rsa_signature(sid, msg, SignatureScheme::Pss).unwrap();
    let pss2 = w.cdm.generate_rsa_signature(sid, msg, SignatureScheme::Pss).unwrap();
    assert_eq!(pss1.len(), 256);
    assert_ne!(pss1, pss2);
    assert!(crypto::rsa_verify(&public, SignatureScheme::Pss, msg, &pss1));
    assert!(crypto::rsa_verify(&public, SignatureScheme::Pss, msg, &pss2));
    assert!(!crypto::rsa_verify(&public, SignatureScheme::Pkcs1v15, msg, &pss1));

    let v1 = w.cdm.generate_rsa_signature(sid, msg, SignatureScheme::Pkcs1v15).unwrap();
    let v2 = w.cdm.generate_rsa_signature(sid, msg, SignatureScheme::Pkcs1v15).unwrap();
    assert_eq!(v1, v2);
    assert!(crypto::rsa_verify(&public, SignatureScheme::Pkcs1v15, msg, &v1));
    assert!(!crypto::rsa_verify(&public, SignatureScheme::Pss, msg, &v1));
}

#[test]
fn session_key_under_another_key_is_oaep_error() {
    let w = basic();
    let (sid, _) = w.provisioned();
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let other = crypto::generate_rsa_key(&mut rng).unwrap().to_public_key();
    let enc = crypto::rsa_oaep_encrypt(&mut rng, &other, &[1; 16]).unwrap();
    let err = w.cdm.derive_keys_from_session_key(sid, &enc, &w.device_blob).unwrap_err();
    assert!(matches!(err, CdmError::OaepError));

    let fresh = w.cdm.open_session().unwrap();
    let err = w.cdm.derive_keys_from_session_key(fresh, &enc, &w.device_blob).unwrap_err();
    assert!(matches!(err, CdmError::NoRsaKey));
}

// --- load_keys ---------------------------------------------------------

#[test]
fn three_keys_share_one_nonce_consumed_once() {
    let w = world(vec![
        spec("a", all_rights(), 0),
        spec("b", all_rights(), 0),
        spec("c", all_rights(), 0),
    ]);
    let (sid, resp) = pending_license(&w);
    for entry in &resp.keys {
        let kcb = open_kcb(&spec_key(&w, &entry.key_id), entry).unwrap();
        assert_eq!(kcb.nonce, resp.nonce);
        assert!(kcb.control_bits.contains(ControlBits::NONCE_REQUIRED));
    }
    let before = live_nonces(&w, sid);
    assert_eq!(w.cdm.load_keys(sid, &Message::from(resp.clone()).encode()).unwrap(), 3);
    assert_eq!(live_nonces(&w, sid), before - 1);
    assert!(!w.cdm.lock().sessions[&sid].nonces.contains(resp.nonce));
    // Replay of the accepted response.
    let err = w.cdm.load_keys(sid, &Message::from(resp).encode()).unwrap_err();
    assert!(matches!(err, CdmError::StaleNonce));
}

#[test]
fn wrong_kcb_magic_rejects_the_whole_response() {
    let w = basic();
    let (sid, mut resp) = pending_license(&w);
    let entry = &mut resp.keys[1];
    let key = spec_key(&w, &entry.key_id);
    let mut kcb = crypto::cbc_decrypt_block(&key, &entry.iv, &entry.kcb);
    kcb[..4].copy_from_slice(b"kct9");
    entry.kcb = crypto::cbc_encrypt_block(&key, &entry.iv, &kcb);
    let raw = sign(resp.into(), &mac_server_key(&w, sid));
    assert!(matches!(w.cdm.load_keys(sid, &raw), Err(CdmError::BadKcbMagic)));
    assert!(key_table(&w, sid).is_empty());
}

#[test]
fn clear_kcb_is_accepted_when_flagged() {
    let w = basic();
    let (sid, mut resp) = pending_license(&w);
    for entry in &mut resp.keys {
        entry.kcb = crypto::cbc_decrypt_block(&spec_key(&w, &entry.key_id), &entry.iv, &entry.kcb);
        entry.kcb_encrypted = false;
    }
    let raw = sign(resp.into(), &mac_server_key(&w, sid));
    assert_eq!(w.cdm.load_keys(sid, &raw).unwrap(), 2);
}

#[test]
fn nonce_free_kcb_skips_the_table() {
    let w = basic();
    let (sid, mut resp) = pending_license(&w);
    for entry in &mut resp.keys {
        let key = spec_key(&w, &entry.key_id);
        let kcb = KeyControlBlock::new(0xdead_beef, 0, all_rights());
        entry.kcb = crypto::cbc_encrypt_block(&key, &entry.iv, &kcb.to_bytes());
    }
    let raw = sign(resp.into(), &mac_server_key(&w, sid));
    assert_eq!(w.cdm.load_keys(sid, &raw).unwrap(), 2);
}

#[test]
fn stale_kcb_nonce_loads_nothing() {
    let w = basic();
    let (sid, mut resp) = pending_license(&w);
    let entry = &mut resp.keys[1];
    let key = spec_key(&w, &entry.key_id);
    let kcb = KeyControlBlock::new(resp.nonce.wrapping_add(1), 0, all_rights() | ControlBits::NONCE_REQUIRED);
    entry.kcb = crypto::cbc_encrypt_block(&key, &entry.iv, &kcb.to_bytes());
    let before = live_nonces(&w, sid);
    let raw = sign(resp.into(), &mac_server_key(&w, sid));
    assert!(matches!(w.cdm.load_keys(sid, &raw), Err(CdmError::StaleNonce)));
    assert!(key_table(&w, sid).is_empty());
    assert_eq!(live_nonces(&w, sid), before);
}

#[test]
fn tampered_license_leaves_state_unchanged() {
    let w = basic();
    let (sid, _) = w.licensed();
    let snapshot = key_table(&w, sid);
    let mut client = w.client();
    let raw = client.request_license(sid, &[b"video".to_vec()]).unwrap();
    let Ok(Message::LicenseResponse(resp)) = Message::decode(&raw) else { panic!() };
    w.cdm.derive_keys_from_session_key(sid, &resp.enc_session_key, &w.device_blob).unwrap();
    let nonces = live_nonces(&w, sid);
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    for _ in 0..64 {
        let bit = rng.gen_range(0..raw.len() * 8);
        let mut bad = raw.clone();
        bad[bit / 8] ^= 1 << (bit % 8);
        let err = w.cdm.load_keys(sid, &bad).unwrap_err();
        assert!(matches!(err, CdmError::BadServerMac), "bit {bit}: {err}");
        assert_eq!(key_table(&w, sid), snapshot);
        assert_eq!(live_nonces(&w, sid), nonces);
    }
    assert_eq!(w.cdm.load_keys(sid, &raw).unwrap(), 1);
}

#[test]
fn rotated_server_key_takes_over() {
    let w = world_with(vec![spec("video", all_rights(), 10)], true, 21);
    let (sid, resp) = pending_license(&w);
    let old = mac_server_key(&w, sid);
    w.cdm.load_keys(sid, &Message::from(resp).encode()).unwrap();
    assert_ne!(mac_server_key(&w, sid), old);
}

// --- refresh -----------------------------------------------------------

#[test]
fn refresh_restores_an_expired_key_and_changes_only_ttl() {
    let w = world(vec![spec("video", ControlBits::ALLOW_CONTENT_DECRYPT, 1)]);
    let (sid, license) = w.licensed();
    let data = [0x42u8; 48];
    let plan = [Subsample::new(0, 48)];
    w.cdm.select_key(sid, b"video").unwrap();
    let expected = w.cdm.decrypt_cenc(sid, &data, &plan, &[0; 16]).unwrap();
    let before = w.cdm.query_key_control(sid, b"video").unwrap();

    w.clock.advance(Duration::from_millis(1500));
    assert!(matches!(w.cdm.decrypt_cenc(sid, &data, &plan, &[0; 16]), Err(CdmError::KeyExpired)));

    w.server.set_key_ttl(b"video", 300).unwrap();
    w.client().refresh(sid, &license, b"video").unwrap();
    assert_eq!(w.cdm.decrypt_cenc(sid, &data, &plan, &[0; 16]).unwrap(), expected);
    let after = w.cdm.query_key_control(sid, b"video").unwrap();
    assert_eq!(after.ttl, 300);
    assert_eq!((after.magic, after.nonce, after.control_bits), (before.magic, before.nonce, before.control_bits));
}

fn refresh_response(w: &World, sid: SessionId, key_id: &[u8], control: Option<KeyEntry>, ttl: u32) -> Vec<u8> {
    let nonce = w.cdm.generate_nonce(sid).unwrap();
    let resp = RefreshResponse {
        nonce,
        request_id: vec![0; 16],
        control,
        key_id: key_id.to_vec(),
        ttl,
        mac: [0; 32],
    };
    sign(resp.into(), &mac_server_key(w, sid))
}

#[test]
fn refresh_cannot_change_control_bits() {
    let w = world(vec![spec("video", ControlBits::ALLOW_CONTENT_DECRYPT, 60)]);
    let (sid, _) = w.licensed();
    let key = spec_key(&w, b"video");
    let iv = [3u8; 16];
    let widened = KeyControlBlock::new(0, 600, all_rights());
    let control = KeyEntry {
        key_id: b"video".to_vec(),
        iv,
        enc_key: Vec::new(),
        kcb: crypto::cbc_encrypt_block(&key, &iv, &widened.to_bytes()),
        kcb_encrypted: true,
    };
    let raw = refresh_response(&w, sid, b"video", Some(control), 600);
    w.cdm.refresh_keys(sid, &raw).unwrap();
    let kcb = w.cdm.query_key_control(sid, b"video").unwrap();
    assert_eq!(kcb.ttl, 600);
    assert_eq!(kcb.control_bits, ControlBits::ALLOW_CONTENT_DECRYPT | ControlBits::NONCE_REQUIRED);
    w.cdm.select_key(sid, b"video").unwrap();
    assert!(matches!(w.cdm.generic_sign(sid, b"x"), Err(CdmError::UsageDenied)));
}

#[test]
fn refresh_for_absent_key_is_unknown() {
    let w = basic();
    let (sid, _) = w.licensed();
    let raw = refresh_response(&w, sid, b"nope", None, 300);
    assert!(matches!(w.cdm.refresh_keys(sid, &raw), Err(CdmError::UnknownKeyId)));
}

#[test]
fn refresh_replay_is_stale() {
    let w = basic();
    let (sid, _) = w.licensed();
    let raw = refresh_response(&w, sid, b"video", None, 30);
    w.cdm.refresh_keys(sid, &raw).unwrap();
    assert!(matches!(w.cdm.refresh_keys(sid, &raw), Err(CdmError::StaleNonce)));
}

// --- selection and decryption -----------------------------------------

#[test]
fn selected_key_decides_the_plaintext() {
    let w = basic();
    let (sid, _) = w.licensed();
    let mut cdn = crate::server::Cdn::new(&w.specs, Some(1));
    let plain: Vec<u8> = (0..1000u32).map(|i| i as u8).collect();
    let plan = crate::server::repeating_plan(plain.len(), 16, 112);
    let pkg = cdn.encrypt_content(b"audio", &plain, &plan).unwrap();
    w.cdm.select_key(sid, b"video").unwrap();
    assert_ne!(w.cdm.decrypt_cenc(sid, &pkg.data, &pkg.subsamples, &pkg.iv).unwrap(), plain);
    w.cdm.select_key(sid, b"audio").unwrap();
    assert_eq!(w.cdm.decrypt_cenc(sid, &pkg.data, &pkg.subsamples, &pkg.iv).unwrap(), plain);
}

#[test]
fn selection_errors() {
    let w = basic();
    let (sid, _) = w.licensed();
    assert!(matches!(w.cdm.decrypt_cenc(sid, b"", &[], &[0; 16]), Err(CdmError::NoKeySelected)));
    assert!(matches!(w.cdm.select_key(sid, b"nope"), Err(CdmError::UnknownKeyId)));
    w.cdm.select_key(sid, b"video").unwrap();
    w.cdm.close_session(sid).unwrap();
    assert!(matches!(w.cdm.decrypt_cenc(sid, b"", &[], &[0; 16]), Err(CdmError::UnknownSession)));
}

#[test]
fn all_clear_subsamples_are_identity() {
    let w = basic();
    let (sid, _) = w.licensed();
    w.cdm.select_key(sid, b"video").unwrap();
    let data: Vec<u8> = (0..77u8).collect();
    let plan = [Subsample::new(10, 0), Subsample::new(67, 0)];
    assert_eq!(w.cdm.decrypt_cenc(sid, &data, &plan, &[1; 16]).unwrap(), data);
}

#[test]
fn protected_subsample_matches_ctr_oracle() {
    let w = basic();
    let (sid, _) = w.licensed();
    w.cdm.select_key(sid, b"video").unwrap();
    let key = spec_key(&w, b"video");
    let iv = [0xff; 16]; // counter wraps on the second block
    let plain: Vec<u8> = (0..100u8).collect();
    let ct = ctr_oracle(&key, &iv, &plain);
    assert_eq!(w.cdm.decrypt_cenc(sid, &ct, &[Subsample::new(0, 100)], &iv).unwrap(), plain);
}

#[test]
fn ctr_stream_continues_across_subsamples() {
    let w = basic();
    let (sid, _) = w.licensed();
    w.cdm.select_key(sid, b"video").unwrap();
    let data = vec![0x5a; 96];
    let whole = w.cdm.decrypt_cenc(sid, &data, &[Subsample::new(0, 96)], &[4; 16]).unwrap();
    for split in [16, 32, 48, 80] {
        let plan = [Subsample::new(0, split), Subsample::new(0, 96 - split)];
        assert_eq!(w.cdm.decrypt_cenc(sid, &data, &plan, &[4; 16]).unwrap(), whole);
    }
}

#[test]
fn plan_must_cover_the_buffer() {
    let w = basic();
    let (sid, _) = w.licensed();
    w.cdm.select_key(sid, b"video").unwrap();
    let err = w.cdm.decrypt_cenc(sid, &[0; 10], &[Subsample::new(0, 9)], &[0; 16]).unwrap_err();
    assert!(matches!(err, CdmError::InvalidInput(_)));
}

#[test]
fn ttl_expiry_blocks_decryption() {
    let w = world(vec![spec("video", all_rights(), 1), spec("forever", all_rights(), 0)]);
    let (sid, _) = w.licensed();
    w.cdm.select_key(sid, b"video").unwrap();
    w.clock.advance(Duration::from_secs(1));
    w.cdm.decrypt_cenc(sid, &[0; 4], &[Subsample::new(0, 4)], &[0; 16]).unwrap();
    w.clock.advance(Duration::from_millis(1));
    assert!(matches!(
        w.cdm.decrypt_cenc(sid, &[0; 4], &[Subsample::new(0, 4)], &[0; 16]),
        Err(CdmError::KeyExpired)
    ));
    assert!(matches!(w.cdm.generic_sign(sid, b"x"), Err(CdmError::KeyExpired)));
    w.clock.advance(Duration::from_secs(100_000));
    w.cdm.select_key(sid, b"forever").unwrap();
    w.cdm.decrypt_cenc(sid, &[0; 4], &[Subsample::new(0, 4)], &[0; 16]).unwrap();
}

// --- generic crypto ----------------------------------------------------

#[test]
fn generic_round_trips() {
    let w = basic();
    let (sid, _) = w.licensed();
    w.cdm.select_key(sid, b"video").unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    for len in [0, 1, 15, 16, 17, 1000, 64 * 1024] {
        let mut m = vec![0u8; len];
        rng.fill_bytes(&mut m);
        let iv: Iv = rng.gen();
        let ct = w.cdm.generic_encrypt(sid, &m, &iv).unwrap();
        assert_eq!(ct.len(), (len / 16 + 1) * 16);
        assert_eq!(w.cdm.generic_decrypt(sid, &ct, &iv).unwrap(), m);
        let tag = w.cdm.generic_sign(sid, &m).unwrap();
        assert_eq!(tag, hmac_oracle(&spec_key(&w, b"video"), &m));
        assert!(w.cdm.generic_verify(sid, &m, &tag).unwrap());
        let mut changed = m.clone();
        changed.push(0);
        assert!(!w.cdm.generic_verify(sid, &changed, &tag).unwrap());
    }
    assert!(matches!(w.cdm.generic_decrypt(sid, &[0; 15], &[0; 16]), Err(CdmError::BadPadding)));
}

#[test]
fn each_right_gates_exactly_its_operation() {
    let specs: Vec<_> = (0u32..32)
        .map(|mask| {
            let bits = ControlBits::RIGHTS
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .fold(ControlBits::empty(), |a, (_, b)| a | *b);
            spec(&format!("k{mask:02}"), bits, 0)
        })
        .collect();
    let w = world(specs);
    let (sid, _) = w.licensed();
    let iv = [0u8; 16];
    for s in &w.specs {
        w.cdm.select_key(sid, &s.key_id).unwrap();
        let ct = crypto::cbc_encrypt(&s.key, &iv, b"payload");
        let tag = crypto::hmac_sha256(&s.key, b"payload");
        let outcomes = [
            w.cdm.decrypt_cenc(sid, b"abc", &[Subsample::new(0, 3)], &iv).map(drop),
            w.cdm.generic_encrypt(sid, b"payload", &iv).map(drop),
            w.cdm.generic_decrypt(sid, &ct, &iv).map(drop),
            w.cdm.generic_sign(sid, b"payload").map(drop),
            w.cdm.generic_verify(sid, b"payload", &tag).map(|ok| assert!(ok)),
        ];
        for (right, outcome) in ControlBits::RIGHTS.iter().zip(outcomes) {
            if s.control_bits.contains(*right) {
                outcome.unwrap();
            } else {
                assert!(matches!(outcome, Err(CdmError::UsageDenied)), "{:?} {right:?}", s.control_bits);
            }
        }
    }
}

// --- device queries and misc ------------------------------------------

#[test]
fn device_queries() {
    let w = basic();
    assert_eq!(w.cdm.query_device_info(DeviceQuery::DeviceId).unwrap().len(), 32);
    assert_eq!(w.cdm.query_device_info(DeviceQuery::KeyData).unwrap().len(), 72);
    assert!(w.cdm.query_device_info(DeviceQuery::Random(0)).unwrap().is_empty());
    assert_eq!(w.cdm.query_device_info(DeviceQuery::Random(33)).unwrap().len(), 33);
    assert_eq!(w.cdm.query_device_info(DeviceQuery::SecurityLevel).unwrap(), b"L_SIM");
    assert_eq!(w.cdm.query_device_info(DeviceQuery::ApiVersion).unwrap(), crate::API_VERSION.as_bytes());

    let bare = Cdm::new(CdmConfig::default(), None, Arc::new(crate::clock::ScriptedClock::new()));
    assert!(matches!(bare.query_device_info(DeviceQuery::DeviceId), Err(CdmError::NoKeybox)));
    assert!(matches!(bare.is_keybox_valid(), Err(CdmError::NoKeybox)));
}

#[test]
fn keybox_install_and_wrap() {
    let w = basic();
    let transport = [0x11; 16];
    let wrapped = w.cdm.wrap_keybox(&w.keybox, &transport).unwrap();
    let bare = Cdm::new(CdmConfig::default(), None, Arc::new(crate::clock::ScriptedClock::new()));
    assert!(bare.install_keybox(&wrapped, &[0x12; 16]).is_err());
    bare.install_keybox(&wrapped, &transport).unwrap();
    bare.is_keybox_valid().unwrap();
    assert_eq!(bare.query_device_info(DeviceQuery::DeviceId).unwrap(), w.keybox.device_id);
}

#[test]
fn usage_table_is_unsupported() {
    let w = basic();
    assert!(matches!(w.cdm.usage_table(UsageTableOp::ReportUsage), Err(CdmError::Unsupported)));
    assert!(w.cdm.trace_lines().last().unwrap().contains("status=Error:Unsupported"));
}

#[test]
fn trace_follows_the_protocol_and_never_shows_content_keys() {
    let w = basic();
    let (sid, _) = w.licensed();
    w.cdm.select_key(sid, b"video").unwrap();
    w.cdm.decrypt_cenc(sid, &[0; 32], &[Subsample::new(0, 32)], &[0; 16]).unwrap();
    w.cdm.close_session(sid).unwrap();
    let lines = w.cdm.trace_lines();
    let names: Vec<&str> = lines.iter().map(|l| l.split(' ').next().unwrap()).collect();
    let expected = [
        "oecc09", "oecc14", "oecc12", "oecc13", "oecc18", "oecc19", "oecc14", "oecc20", "oecc21", "oecc15",
        "oecc17", "oecc48", "oecc10",
    ];
    let mut it = names.iter();
    for want in expected {
        assert!(it.any(|n| *n == want), "{want} missing or out of order in {names:?}");
    }
    let text = lines.join("\n");
    for s in &w.specs {
        assert!(!text.contains(&hex::encode(s.key)));
    }
}
