#![allow(dead_code)]

use std::path::PathBuf;

use aes::cipher::{BlockEncrypt, KeyInit};
use aes::Aes128;
use proptest::collection::vec;
use proptest::prelude::*;
use wvsim_core::crypto::SignatureScheme;
use wvsim_core::wire::*;
use wvsim_core::testkit::{all_rights, spec, world_with};

/// Names of the golden frames, in protocol order.
pub const GOLDEN: [&str; 7] = [
    "prov_req",
    "prov_resp",
    "lic_req",
    "lic_resp",
    "refresh_req",
    "refresh_resp",
    "error",
];

pub const GOLDEN_SEED: u64 = 0x5eed;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Runs provisioning, licensing and a refresh with every RNG seeded, and
/// returns the frames exchanged plus one server error frame.
pub fn golden_frames(seed: u64) -> Vec<(&'static str, Vec<u8>)> {
    let w = world_with(vec![spec("video", all_rights(), 60), spec("audio", all_rights(), 60)], false, seed);
    let sid = w.cdm.open_session().unwrap();
    let mut client = w.client();
    client.ensure_credential(sid, None).unwrap();
    let license = client.license(sid, &[b"video".to_vec(), b"audio".to_vec()]).unwrap();
    client.refresh(sid, &license, b"video").unwrap();
    let ex = &client.endpoint.exchanges;
    assert_eq!(ex.len(), 3);
    let error = w.server.handle(b"WVSIM1\x03not a frame");
    let frames = [&ex[0].0, &ex[0].1, &ex[1].0, &ex[1].1, &ex[2].0, &ex[2].1, &error];
    GOLDEN.iter().zip(frames).map(|(n, f)| (*n, f.clone())).collect()
}

/// AES-CMAC (RFC 4493) built from raw AES block encryptions.
pub fn cmac_oracle(key: &[u8; 16], msg: &[u8]) -> [u8; 16] {
    let aes = Aes128::new(key.into());
    let enc = |b: [u8; 16]| {
        let mut block = b.into();
        aes.encrypt_block(&mut block);
        <[u8; 16]>::from(block)
    };
    let dbl = |b: [u8; 16]| {
        let v = u128::from_be_bytes(b);
        let r = (v << 1) ^ if v >> 127 == 1 { 0x87 } else { 0 };
        r.to_be_bytes()
    };
    let k1 = dbl(enc([0; 16]));
    let k2 = dbl(k1);

    let n = msg.len().div_ceil(16).max(1);
    let complete = !msg.is_empty() && msg.len().is_multiple_of(16);
    let mut last = [0u8; 16];
    let tail = &msg[(n - 1) * 16..];
    last[..tail.len()].copy_from_slice(tail);
    let subkey = if complete {
        k1
    } else {
        last[tail.len()] = 0x80;
        k2
    };
    let mut x = [0u8; 16];
    for block in msg.chunks(16).take(n - 1) {
        for (a, b) in x.iter_mut().zip(block) {
            *a ^= b;
        }
        x = enc(x);
    }
    for i in 0..16 {
        x[i] ^= last[i] ^ subkey[i];
    }
    enc(x)
}

/// Key set for `parent` and `blob`, with the contexts spelled out literally.
pub fn derivation_oracle(parent: &[u8; 16], blob: &[u8]) -> ([u8; 16], [u8; 32], [u8; 32]) {
    let ctx = |label: &[u8]| [label, blob].concat();
    let asset = cmac_oracle(parent, &ctx(b"1ENCRYPTION"));
    let chunk = |i: u8| cmac_oracle(parent, &ctx(&[&[b'0' + i][..], b"AUTHENTICATION"].concat()));
    let client = [chunk(1), chunk(2)].concat().try_into().unwrap();
    let server = [chunk(3), chunk(4)].concat().try_into().unwrap();
    (asset, client, server)
}

/// AES-128-CTR keystream XOR with a 128-bit big-endian counter.
pub fn ctr_oracle(key: &[u8; 16], iv: &[u8; 16], data: &[u8]) -> Vec<u8> {
    let aes = Aes128::new(key.into());
    let mut counter = u128::from_be_bytes(*iv);
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(16) {
        let mut block = counter.to_be_bytes().into();
        aes.encrypt_block(&mut block);
        out.extend(chunk.iter().zip(block.iter()).map(|(a, b)| a ^ b));
        counter = counter.wrapping_add(1);
    }
    out
}

// Schema-valid messages: fixed-length fields get exact sizes, the session key
// ciphertext is a full RSA block, and error text is printable UTF-8.

pub fn bytes(max: usize) -> impl Strategy<Value = Vec<u8>> {
    vec(any::<u8>(), 0..max)
}

pub fn array<const N: usize>() -> impl Strategy<Value = [u8; N]> {
    vec(any::<u8>(), N).prop_map(|v| v.try_into().unwrap())
}

pub fn key_entry() -> impl Strategy<Value = KeyEntry> {
    (bytes(40), array::<16>(), bytes(48), array::<16>(), any::<bool>()).prop_map(
        |(key_id, iv, enc_key, kcb, kcb_encrypted)| KeyEntry { key_id, iv, enc_key, kcb, kcb_encrypted },
    )
}

pub fn message() -> impl Strategy<Value = Message> {
    let scheme = prop_oneof![Just(SignatureScheme::Pss), Just(SignatureScheme::Pkcs1v15)];
    prop_oneof![
        (any::<u32>(), array::<32>(), array::<72>(), bytes(24), array::<32>()).prop_map(
            |(nonce, device_id, provisioning_token, request_id, mac)| {
                Message::ProvisioningRequest(ProvisioningRequest { nonce, device_id, provisioning_token, request_id, mac })
            }
        ),
        (any::<u32>(), array::<16>(), bytes(1400), array::<32>()).prop_map(|(nonce, iv, ciphertext, mac)| {
            Message::ProvisioningResponse(ProvisioningResponse { nonce, iv, ciphertext, mac })
        }),
        (any::<u32>(), array::<32>(), bytes(64), bytes(24), bytes(300), scheme, vec(bytes(40), 0..6)).prop_map(
            |(nonce, device_id, device_blob, request_id, signature, scheme, key_ids)| {
                Message::LicenseRequest(LicenseRequest {
                    nonce,
                    device_id,
                    device_blob,
                    request_id,
                    signature,
                    scheme,
                    key_ids,
                })
            }
        ),
        (
            any::<u32>(),
            bytes(24),
            vec(any::<u8>(), 256),
            vec(key_entry(), 0..5),
            proptest::option::of(bytes(64)),
            array::<32>()
        )
            .prop_map(|(nonce, request_id, enc_session_key, keys, new_server_mac_key, mac)| {
                Message::LicenseResponse(LicenseResponse {
                    nonce,
                    request_id,
                    enc_session_key,
                    keys,
                    new_server_mac_key,
                    mac,
                })
            }),
        (any::<u32>(), bytes(24), bytes(40), array::<32>()).prop_map(|(nonce, request_id, key_id, mac)| {
            Message::RefreshRequest(RefreshRequest { nonce, request_id, key_id, mac })
        }),
        (any::<u32>(), bytes(24), proptest::option::of(key_entry()), bytes(40), any::<u32>(), array::<32>())
            .prop_map(|(nonce, request_id, control, key_id, ttl, mac)| {
                Message::RefreshResponse(RefreshResponse { nonce, request_id, control, key_id, ttl, mac })
            }),
        "\\PC{0,80}".prop_map(|text| Message::Error(ErrorMessage { text })),
    ]
}
