//! Authenticated-encryption envelope and framed wire protocol.
//!
//! Every message between the backend and the Inspector travels as a
//! [`SealedMessage`]: the canonical plaintext is extended with a role
//! signature (a keyed tag under the sender role's signing key), encrypted
//! with AES-256-CBC under a fresh random IV, and the whole frame is
//! authenticated encrypt-then-MAC with HMAC-SHA256 over header, IV, and
//! ciphertext. Opening verifies the MAC before touching the ciphertext and
//! the role signature after decryption; both must pass.
//!
//! Wire frame (bit-exact, see `docs/PROTOCOL.md`):
//! magic `0x45504152` ("EPAR"), u8 version = 1, u8 message type,
//! u32 ciphertext length (little-endian), then IV (16 bytes), ciphertext,
//! and MAC tag (32 bytes). Frames are length-delimited over a stream socket.
//!
//! The roles sign with distinct keys, so results re-signed under the wrong
//! role are rejected even when the channel MAC verifies. Signatures are
//! keyed tags rather than asymmetric signatures, matching a latency budget
//! that rules out RSA-class verification inside an SMI; an asymmetric scheme
//! can replace the tag without changing the frame layout.

use std::collections::HashSet;
use std::io::{Read, Write};

use aes::cipher::{block_padding::Pkcs7, BlockDecryptMut, BlockEncryptMut, KeyIvInit};
use hmac::{Hmac, Mac};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use subtle::ConstantTimeEq;
use thiserror::Error;

use crate::model::Nonce;

type Aes256CbcEnc = cbc::Encryptor<aes::Aes256>;
type Aes256CbcDec = cbc::Decryptor<aes::Aes256>;
type HmacSha256 = Hmac<Sha256>;

/// First four bytes of every frame: "EPAR".
pub const WIRE_MAGIC: [u8; 4] = *b"EPAR";
/// Wire protocol version.
pub const WIRE_VERSION: u8 = 1;
/// Fixed header length: magic + version + type + length.
pub const HEADER_LEN: usize = 10;
/// Bytes of IV per message.
pub const IV_LEN: usize = 16;
/// Bytes of MAC tag per message.
pub const MAC_LEN: usize = 32;
/// Largest ciphertext accepted from the wire.
pub const MAX_CIPHERTEXT: usize = 8 * 1024 * 1024;

/// Message kinds carried by the wire protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MsgType {
    Bin = 1,
    Results = 2,
    Alert = 3,
    Control = 4,
}

impl MsgType {
    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(MsgType::Bin),
            2 => Some(MsgType::Results),
            3 => Some(MsgType::Alert),
            4 => Some(MsgType::Control),
            _ => None,
        }
    }
}

/// Principals that sign envelope payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    BackendManager,
    Inspector,
    DiagnosisManager,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::BackendManager, Role::Inspector, Role::DiagnosisManager];

    fn label(&self) -> &'static [u8] {
        match self {
            Role::BackendManager => b"role:backend-manager",
            Role::Inspector => b"role:inspector",
            Role::DiagnosisManager => b"role:diagnosis-manager",
        }
    }
}

/// Keys for one direction of the channel: the shared encryption and MAC keys
/// plus the signing key of the role whose messages these keys seal or verify.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeySet {
    #[serde(with = "hex_key")]
    pub signing_key: [u8; 32],
    #[serde(with = "hex_key")]
    pub mac_key: [u8; 32],
    #[serde(with = "hex_key")]
    pub enc_key: [u8; 32],
    pub role: Role,
}

mod hex_key {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(key: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(key))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(&s).map_err(serde::de::Error::custom)?;
        v.try_into().map_err(|_| serde::de::Error::custom("key must be 32 bytes"))
    }
}

impl KeySet {
    pub fn validate(&self) -> Result<(), EnvelopeError> {
        if self.signing_key == self.mac_key
            || self.signing_key == self.enc_key
            || self.mac_key == self.enc_key
        {
            return Err(EnvelopeError::KeysNotDistinct);
        }
        Ok(())
    }
}

/// All provisioned key material, derived deterministically from one master
/// seed: one shared encryption key, one shared MAC key, and one signing key
/// per role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyMaterial {
    #[serde(with = "hex_key")]
    pub enc_key: [u8; 32],
    #[serde(with = "hex_key")]
    pub mac_key: [u8; 32],
    #[serde(with = "hex_key")]
    pub backend_signing: [u8; 32],
    #[serde(with = "hex_key")]
    pub inspector_signing: [u8; 32],
    #[serde(with = "hex_key")]
    pub dm_signing: [u8; 32],
}

fn derive_key(master: &[u8; 32], label: &[u8]) -> [u8; 32] {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(master).expect("hmac accepts 32-byte keys");
    mac.update(label);
    mac.finalize().into_bytes().into()
}

impl KeyMaterial {
    pub fn from_master(master: &[u8; 32]) -> Self {
        KeyMaterial {
            enc_key: derive_key(master, b"key:enc"),
            mac_key: derive_key(master, b"key:mac"),
            backend_signing: derive_key(master, Role::BackendManager.label()),
            inspector_signing: derive_key(master, Role::Inspector.label()),
            dm_signing: derive_key(master, Role::DiagnosisManager.label()),
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        let mut master = [0u8; 32];
        master[..8].copy_from_slice(&seed.to_le_bytes());
        Self::from_master(&master)
    }

    fn signing_key(&self, role: Role) -> [u8; 32] {
        match role {
            Role::BackendManager => self.backend_signing,
            Role::Inspector => self.inspector_signing,
            Role::DiagnosisManager => self.dm_signing,
        }
    }

    /// Keys that seal messages from `role`, or verify messages expected to
    /// come from `role`.
    pub fn keyset_for(&self, role: Role) -> KeySet {
        KeySet {
            signing_key: self.signing_key(role),
            mac_key: self.mac_key,
            enc_key: self.enc_key,
            role,
        }
    }
}

/// A sealed wire message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedMessage {
    pub msg_type: MsgType,
    pub iv: [u8; IV_LEN],
    pub ciphertext: Vec<u8>,
    pub mac_tag: [u8; MAC_LEN],
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
    #[error("MAC verification failed")]
    MacFailure,
    #[error("role signature verification failed")]
    SigFailure,
    #[error("keys within a key set must be pairwise distinct")]
    KeysNotDistinct,
    #[error("frame I/O failed: {0}")]
    Io(String),
}

fn header_bytes(msg_type: MsgType, ciphertext_len: u32) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(&WIRE_MAGIC);
    h[4] = WIRE_VERSION;
    h[5] = msg_type as u8;
    h[6..10].copy_from_slice(&ciphertext_len.to_le_bytes());
    h
}

fn compute_mac(mac_key: &[u8; 32], header: &[u8], iv: &[u8], ciphertext: &[u8]) -> [u8; MAC_LEN] {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(mac_key).expect("hmac accepts 32-byte keys");
    mac.update(header);
    mac.update(iv);
    mac.update(ciphertext);
    mac.finalize().into_bytes().into()
}

fn role_signature(keys: &KeySet, msg_type: MsgType, payload: &[u8]) -> [u8; 32] {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(&keys.signing_key)
        .expect("hmac accepts 32-byte keys");
    mac.update(keys.role.label());
    mac.update(&[WIRE_VERSION, msg_type as u8]);
    mac.update(payload);
    mac.finalize().into_bytes().into()
}

/// Keyed tag over arbitrary canonical bytes under a role signing key. Used
/// for the task-, result-, and check-level signatures embedded in payloads.
pub fn sign_record(signing_key: &[u8; 32], context: &'static [u8], record: &[u8]) -> [u8; 32] {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(signing_key)
        .expect("hmac accepts 32-byte keys");
    mac.update(context);
    mac.update(record);
    mac.finalize().into_bytes().into()
}

pub fn verify_record(
    signing_key: &[u8; 32],
    context: &'static [u8],
    record: &[u8],
    tag: &[u8; 32],
) -> bool {
    let expected = sign_record(signing_key, context, record);
    expected.ct_eq(tag).into()
}

/// Signs, tags, and encrypts a payload as `keys.role`.
///
/// Each call draws a fresh IV, so sealing the same plaintext twice yields
/// distinct ciphertexts.
pub fn seal(
    payload: &[u8],
    keys: &KeySet,
    msg_type: MsgType,
    rng: &mut dyn RngCore,
) -> SealedMessage {
    let sig = role_signature(keys, msg_type, payload);
    let mut inner = Vec::with_capacity(payload.len() + sig.len());
    inner.extend_from_slice(payload);
    inner.extend_from_slice(&sig);

    let mut iv = [0u8; IV_LEN];
    rng.fill_bytes(&mut iv);
    let ciphertext = Aes256CbcEnc::new(&keys.enc_key.into(), &iv.into())
        .encrypt_padded_vec_mut::<Pkcs7>(&inner);

    let header = header_bytes(msg_type, ciphertext.len() as u32);
    let mac_tag = compute_mac(&keys.mac_key, &header, &iv, &ciphertext);
    SealedMessage { msg_type, iv, ciphertext, mac_tag }
}

/// Verifies and decrypts a sealed message expected to come from `keys.role`.
///
/// The MAC is checked before decryption; the role signature after. Returns
/// the payload with the embedded signature stripped.
pub fn open(msg: &SealedMessage, keys: &KeySet) -> Result<Vec<u8>, EnvelopeError> {
    let header = header_bytes(msg.msg_type, msg.ciphertext.len() as u32);
    let expected = compute_mac(&keys.mac_key, &header, &msg.iv, &msg.ciphertext);
    if !bool::from(expected.ct_eq(&msg.mac_tag)) {
        return Err(EnvelopeError::MacFailure);
    }
    let inner = Aes256CbcDec::new(&keys.enc_key.into(), &msg.iv.into())
        .decrypt_padded_vec_mut::<Pkcs7>(&msg.ciphertext)
        .map_err(|_| EnvelopeError::MacFailure)?;
    if inner.len() < 32 {
        return Err(EnvelopeError::Malformed("plaintext shorter than signature"));
    }
    let (payload, sig) = inner.split_at(inner.len() - 32);
    let expected_sig = role_signature(keys, msg.msg_type, payload);
    if !bool::from(expected_sig.ct_eq(sig)) {
        return Err(EnvelopeError::SigFailure);
    }
    Ok(payload.to_vec())
}

impl SealedMessage {
    /// Serializes the full wire frame.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = header_bytes(self.msg_type, self.ciphertext.len() as u32);
        let mut out = Vec::with_capacity(HEADER_LEN + IV_LEN + self.ciphertext.len() + MAC_LEN);
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.iv);
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.mac_tag);
        out
    }

    /// Parses a full wire frame.
    pub fn from_bytes(data: &[u8]) -> Result<Self, EnvelopeError> {
        if data.len() < HEADER_LEN + IV_LEN + MAC_LEN {
            return Err(EnvelopeError::Malformed("frame too short"));
        }
        if data[..4] != WIRE_MAGIC {
            return Err(EnvelopeError::Malformed("bad magic"));
        }
        if data[4] != WIRE_VERSION {
            return Err(EnvelopeError::Malformed("unsupported version"));
        }
        let msg_type =
            MsgType::from_code(data[5]).ok_or(EnvelopeError::Malformed("unknown message type"))?;
        let ct_len = u32::from_le_bytes(data[6..10].try_into().unwrap()) as usize;
        if ct_len > MAX_CIPHERTEXT {
            return Err(EnvelopeError::Malformed("ciphertext too long"));
        }
        if data.len() != HEADER_LEN + IV_LEN + ct_len + MAC_LEN {
            return Err(EnvelopeError::Malformed("length mismatch"));
        }
        let mut iv = [0u8; IV_LEN];
        iv.copy_from_slice(&data[HEADER_LEN..HEADER_LEN + IV_LEN]);
        let ciphertext = data[HEADER_LEN + IV_LEN..HEADER_LEN + IV_LEN + ct_len].to_vec();
        let mut mac_tag = [0u8; MAC_LEN];
        mac_tag.copy_from_slice(&data[HEADER_LEN + IV_LEN + ct_len..]);
        Ok(SealedMessage { msg_type, iv, ciphertext, mac_tag })
    }

    /// Writes the frame to a stream.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), EnvelopeError> {
        w.write_all(&self.to_bytes()).map_err(|e| EnvelopeError::Io(e.to_string()))
    }

    /// Reads one length-delimited frame from a stream.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, EnvelopeError> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header).map_err(|e| EnvelopeError::Io(e.to_string()))?;
        if header[..4] != WIRE_MAGIC {
            return Err(EnvelopeError::Malformed("bad magic"));
        }
        if header[4] != WIRE_VERSION {
            return Err(EnvelopeError::Malformed("unsupported version"));
        }
        let ct_len = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
        if ct_len > MAX_CIPHERTEXT {
            return Err(EnvelopeError::Malformed("ciphertext too long"));
        }
        let mut rest = vec![0u8; IV_LEN + ct_len + MAC_LEN];
        r.read_exact(&mut rest).map_err(|e| EnvelopeError::Io(e.to_string()))?;
        let mut frame = header.to_vec();
        frame.extend_from_slice(&rest);
        Self::from_bytes(&frame)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NonceError {
    #[error("results nonce was already consumed (replay)")]
    Replay,
    #[error("results nonce does not match the dispatched bin")]
    Mismatch,
}

/// Nonces already consumed by accepted results, for the lifetime of a run.
#[derive(Debug, Default)]
pub struct NonceRegistry {
    seen: HashSet<Nonce>,
}

impl NonceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}

/// Accepts a results nonce iff it echoes the dispatched bin's nonce and has
/// never been consumed before; consumes it on success.
pub fn check_nonce_echo(
    bin_nonce: Nonce,
    results_nonce: Nonce,
    seen: &mut NonceRegistry,
) -> Result<(), NonceError> {
    if results_nonce != bin_nonce {
        return Err(NonceError::Mismatch);
    }
    if seen.seen.contains(&results_nonce) {
        return Err(NonceError::Replay);
    }
    seen.seen.insert(results_nonce);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn keys() -> KeyMaterial {
        KeyMaterial::from_seed(42)
    }

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(1)
    }

    #[test]
    fn seal_open_roundtrip() {
        let km = keys();
        let ks = km.keyset_for(Role::BackendManager);
        let mut rng = rng();
        let msg = seal(b"the payload", &ks, MsgType::Bin, &mut rng);
        assert_eq!(open(&msg, &ks).unwrap(), b"the payload");
    }

    #[test]
    fn identical_plaintexts_seal_to_distinct_ciphertexts() {
        let km = keys();
        let ks = km.keyset_for(Role::BackendManager);
        let mut rng = rng();
        let a = seal(b"same", &ks, MsgType::Bin, &mut rng);
        let b = seal(b"same", &ks, MsgType::Bin, &mut rng);
        assert_ne!(a.iv, b.iv);
        assert_ne!(a.ciphertext, b.ciphertext);
    }

    #[test]
    fn wrong_channel_keys_fail_mac() {
        let ks1 = keys().keyset_for(Role::BackendManager);
        let ks2 = KeyMaterial::from_seed(43).keyset_for(Role::BackendManager);
        let mut rng = rng();
        let msg = seal(b"x", &ks1, MsgType::Bin, &mut rng);
        assert_eq!(open(&msg, &ks2), Err(EnvelopeError::MacFailure));
    }

    #[test]
    fn wrong_role_fails_signature() {
        // Same channel keys, but the message claims to be Inspector results
        // while actually signed by the policy manager's key.
        let km = keys();
        let dm = km.keyset_for(Role::DiagnosisManager);
        let inspector = km.keyset_for(Role::Inspector);
        let mut rng = rng();
        let msg = seal(b"results", &dm, MsgType::Results, &mut rng);
        assert_eq!(open(&msg, &inspector), Err(EnvelopeError::SigFailure));
    }

    #[test]
    fn every_single_byte_flip_is_rejected() {
        let km = keys();
        let ks = km.keyset_for(Role::Inspector);
        let mut rng = rng();
        let msg = seal(&[0xA5u8; 256], &ks, MsgType::Results, &mut rng);
        let frame = msg.to_bytes();
        for pos in 0..frame.len() {
            let mut tampered = frame.clone();
            tampered[pos] ^= 0xFF;
            let rejected = match SealedMessage::from_bytes(&tampered) {
                Err(_) => true,
                Ok(m) => open(&m, &ks).is_err(),
            };
            assert!(rejected, "flip at byte {pos} was accepted");
        }
    }

    #[test]
    fn frame_roundtrip_over_stream() {
        let km = keys();
        let ks = km.keyset_for(Role::BackendManager);
        let mut rng = rng();
        let a = seal(b"first", &ks, MsgType::Bin, &mut rng);
        let b = seal(b"second", &ks, MsgType::Control, &mut rng);
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        b.write_to(&mut buf).unwrap();
        let mut cursor = std::io::Cursor::new(buf);
        let ra = SealedMessage::read_from(&mut cursor).unwrap();
        let rb = SealedMessage::read_from(&mut cursor).unwrap();
        assert_eq!(ra, a);
        assert_eq!(rb, b);
        assert_eq!(open(&rb, &ks).unwrap(), b"second");
    }

    #[test]
    fn nonce_echo_accepts_then_replays() {
        let mut reg = NonceRegistry::new();
        assert_eq!(check_nonce_echo(7, 7, &mut reg), Ok(()));
        assert_eq!(check_nonce_echo(7, 7, &mut reg), Err(NonceError::Replay));
        assert_eq!(check_nonce_echo(8, 9, &mut reg), Err(NonceError::Mismatch));
        assert_eq!(reg.len(), 1);
    }

    #[test]
    fn derived_keys_are_pairwise_distinct() {
        let km = keys();
        for role in Role::ALL {
            km.keyset_for(role).validate().unwrap();
        }
        assert_ne!(km.backend_signing, km.inspector_signing);
        assert_ne!(km.backend_signing, km.dm_signing);
        assert_ne!(km.inspector_signing, km.dm_signing);
    }

    proptest! {
        #[test]
        fn roundtrip_random_payloads(payload in proptest::collection::vec(any::<u8>(), 0..2048)) {
            let km = keys();
            let ks = km.keyset_for(Role::Inspector);
            let mut rng = rng();
            let msg = seal(&payload, &ks, MsgType::Results, &mut rng);
            prop_assert_eq!(open(&msg, &ks).unwrap(), payload);
        }

        #[test]
        fn random_single_bit_flips_rejected(
            payload in proptest::collection::vec(any::<u8>(), 1..512),
            bit in any::<u32>(),
        ) {
            let km = keys();
            let ks = km.keyset_for(Role::Inspector);
            let mut rng = rng();
            let msg = seal(&payload, &ks, MsgType::Results, &mut rng);
            let mut frame = msg.to_bytes();
            let nbits = frame.len() * 8;
            let target = bit as usize % nbits;
            frame[target / 8] ^= 1 << (target % 8);
            let rejected = match SealedMessage::from_bytes(&frame) {
                Err(_) => true,
                Ok(m) => open(&m, &ks).is_err(),
            };
            prop_assert!(rejected);
        }
    }
}
