//! Thin wrappers over the primitive crates: SHA-256, HKDF-SHA-256 and
//! AES-256-GCM. Everything above this module speaks in 32-byte keys and
//! 12-byte nonces.

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use hkdf::Hkdf;
use rand::RngCore;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Hash32 = [u8; 32];
pub type Key32 = [u8; 32];
pub type Nonce12 = [u8; 12];

pub const TAG_LEN: usize = 16;

pub fn sha256(data: &[u8]) -> Hash32 {
    Sha256::digest(data).into()
}

pub fn sha256_parts(parts: &[&[u8]]) -> Hash32 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

pub fn hkdf32(ikm: &[u8], salt: &[u8], info: &[u8]) -> Key32 {
    let hk = Hkdf::<Sha256>::new(Some(salt), ikm);
    let mut out = [0u8; 32];
    hk.expand(info, &mut out)
        .expect("32 bytes is a valid HKDF-SHA256 output length");
    out
}

pub fn random_bytes<const N: usize>() -> [u8; N] {
    let mut out = [0u8; N];
    rand::thread_rng().fill_bytes(&mut out);
    out
}

/// Symmetric AEAD used for every block, blob and frame. Swappable so tests
/// can observe (key, nonce) pairs.
pub trait BlockCipher: Send + Sync {
    fn encrypt(&self, key: &Key32, nonce: &Nonce12, aad: &[u8], plaintext: &[u8]) -> Vec<u8>;
    fn decrypt(&self, key: &Key32, nonce: &Nonce12, aad: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct AesGcm;

impl BlockCipher for AesGcm {
    fn encrypt(&self, key: &Key32, nonce: &Nonce12, aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
        aead_encrypt(key, nonce, aad, plaintext)
    }

    fn decrypt(&self, key: &Key32, nonce: &Nonce12, aad: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>> {
        aead_decrypt(key, nonce, aad, ciphertext)
    }
}

pub fn aead_encrypt(key: &Key32, nonce: &Nonce12, aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
    let cipher = Aes256Gcm::new(key.into());
    cipher
        .encrypt(Nonce::from_slice(nonce), Payload { msg: plaintext, aad })
        .expect("AES-GCM encryption is infallible for in-memory buffers")
}

pub fn aead_decrypt(key: &Key32, nonce: &Nonce12, aad: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>> {
    let cipher = Aes256Gcm::new(key.into());
    cipher
        .decrypt(Nonce::from_slice(nonce), Payload { msg: ciphertext, aad })
        .map_err(|_| Error::Integrity("AEAD tag did not verify".into()))
}

/// Constant-time equality for digests and MACs.
pub fn ct_eq(a: &[u8], b: &[u8]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}
