//! Software stand-in for a trusted execution environment.
//!
//! The simulator provides the four services the rest of the crate relies on:
//!
//! * a **measurement** of the code and policy bundles that identifies exactly
//!   what is running,
//! * **attestation reports** binding that measurement to a caller nonce,
//!   signed by a platform key that plays the role of the hardware-fused key,
//! * **sealing**, i.e. encryption whose key is derived from the platform
//!   secret and the measurement, so a changed policy cannot unseal old data,
//! * a crash-safe **monotonic counter** used to anchor storage freshness.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::clock::{iso8601, parse_iso8601, SharedClock};
use crate::crypto::{self, Hash32, Nonce12};
use crate::durable;
use crate::error::{Error, Result};
use crate::hexser;

/// SHA-256 over `code ‖ 0x00 ‖ policy`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Measurement(#[serde(with = "hexser")] pub Hash32);

impl Measurement {
    pub fn as_bytes(&self) -> &Hash32 {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        hexser::decode_array(s).map(Measurement)
    }
}

impl fmt::Debug for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Measurement({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn measure(code_bundle: &[u8], policy_bundle: &[u8]) -> Measurement {
    Measurement(crypto::sha256_parts(&[code_bundle, &[0x00], policy_bundle]))
}

/// Simulated hardware key. On disk it is 64 raw bytes: secret ‖ public.
pub struct PlatformKey {
    signing: SigningKey,
}

impl PlatformKey {
    pub fn generate() -> Self {
        Self::from_secret(crypto::random_bytes::<32>())
    }

    pub fn from_secret(secret: [u8; 32]) -> Self {
        Self { signing: SigningKey::from_bytes(&secret) }
    }

    /// Loads the key file, creating it with restricted permissions on first
    /// boot.
    pub fn load_or_create(path: &Path) -> Result<Self> {
        match fs::read(path) {
            Ok(bytes) => Self::from_file_bytes(&bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let key = Self::generate();
                let mut bytes = Vec::with_capacity(64);
                bytes.extend_from_slice(&key.signing.to_bytes());
                bytes.extend_from_slice(key.public().as_bytes());
                durable::atomic_write(path, &bytes)?;
                durable::restrict_permissions(path)?;
                Ok(key)
            }
            Err(e) => Err(Error::Key(format!("{}: {e}", path.display()))),
        }
    }

    fn from_file_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 64 {
            return Err(Error::Key(format!("platform key file must be 64 bytes, found {}", bytes.len())));
        }
        let secret: [u8; 32] = bytes[..32].try_into().expect("checked length");
        let key = Self::from_secret(secret);
        if key.public().as_bytes() != &bytes[32..] {
            return Err(Error::Key("public half does not match secret half".into()));
        }
        Ok(key)
    }

    pub fn public(&self) -> VerifyingKey {
        self.signing.verifying_key()
    }

    pub fn key_id(&self) -> String {
        key_id(&self.public())
    }

    pub fn sign(&self, msg: &[u8]) -> [u8; 64] {
        self.signing.sign(msg).to_bytes()
    }

    fn secret(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }
}

pub fn key_id(pk: &VerifyingKey) -> String {
    hex::encode(&crypto::sha256(pk.as_bytes())[..8])
}

pub fn verify_signature(pk: &VerifyingKey, msg: &[u8], sig: &[u8; 64]) -> bool {
    pk.verify(msg, &Signature::from_bytes(sig)).is_ok()
}

pub fn parse_public_key(hex_str: &str) -> Option<VerifyingKey> {
    let bytes: [u8; 32] = hexser::decode_array(hex_str)?;
    VerifyingKey::from_bytes(&bytes).ok()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationReport {
    pub measurement: Measurement,
    #[serde(with = "hexser")]
    pub nonce: [u8; 32],
    pub issued_at: u64,
    pub platform_key_id: String,
    #[serde(with = "hexser")]
    pub signature: [u8; 64],
}

impl AttestationReport {
    pub fn signed_bytes(measurement: &Measurement, nonce: &[u8; 32], issued_at: u64) -> Vec<u8> {
        let mut msg = Vec::with_capacity(72);
        msg.extend_from_slice(measurement.as_bytes());
        msg.extend_from_slice(nonce);
        msg.extend_from_slice(&issued_at.to_be_bytes());
        msg
    }
}

pub fn generate_report(
    key: Option<&PlatformKey>,
    measurement: Measurement,
    nonce: [u8; 32],
    issued_at: u64,
) -> Result<AttestationReport> {
    let key = key.ok_or_else(|| Error::Key("platform signing key not loaded".into()))?;
    let signature = key.sign(&AttestationReport::signed_bytes(&measurement, &nonce, issued_at));
    Ok(AttestationReport {
        measurement,
        nonce,
        issued_at,
        platform_key_id: key.key_id(),
        signature,
    })
}

pub fn verify_report(
    report: &AttestationReport,
    expected: &Measurement,
    nonce: &[u8; 32],
    platform_pubkey: &VerifyingKey,
) -> bool {
    let msg = AttestationReport::signed_bytes(&report.measurement, &report.nonce, report.issued_at);
    verify_signature(platform_pubkey, &msg, &report.signature)
        && crypto::ct_eq(report.measurement.as_bytes(), expected.as_bytes())
        && crypto::ct_eq(&report.nonce, nonce)
}

/// Ciphertext that only the enclave with `bound_measurement` can open.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SealedBlob {
    pub ciphertext: Vec<u8>,
    pub nonce: Nonce12,
    pub bound_measurement: Measurement,
}

impl SealedBlob {
    /// `bound_measurement ‖ nonce ‖ ciphertext`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(44 + self.ciphertext.len());
        out.extend_from_slice(self.bound_measurement.as_bytes());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 44 + crypto::TAG_LEN {
            return Err(Error::Integrity("sealed blob truncated".into()));
        }
        Ok(Self {
            bound_measurement: Measurement(bytes[..32].try_into().expect("len")),
            nonce: bytes[32..44].try_into().expect("len"),
            ciphertext: bytes[44..].to_vec(),
        })
    }
}

/// The running simulated enclave: platform key, launch measurement and
/// sealing.
pub struct Enclave {
    platform: PlatformKey,
    measurement: Measurement,
    clock: SharedClock,
}

impl Enclave {
    pub fn launch(platform: PlatformKey, code_bundle: &[u8], policy_bundle: &[u8], clock: SharedClock) -> Self {
        Self {
            platform,
            measurement: measure(code_bundle, policy_bundle),
            clock,
        }
    }

    pub fn measurement(&self) -> Measurement {
        self.measurement
    }

    pub fn platform_public(&self) -> VerifyingKey {
        self.platform.public()
    }

    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    pub fn report(&self, nonce: [u8; 32]) -> Result<AttestationReport> {
        generate_report(Some(&self.platform), self.measurement, nonce, self.clock.now())
    }

    /// Signs with the platform identity. Callers prefix `msg` with a domain
    /// tag so signatures for different artefacts never collide.
    pub fn sign(&self, msg: &[u8]) -> [u8; 64] {
        self.platform.sign(msg)
    }

    fn seal_key(&self, m: &Measurement) -> [u8; 32] {
        crypto::hkdf32(&self.platform.secret(), m.as_bytes(), b"seal")
    }

    pub fn seal(&self, data: &[u8]) -> SealedBlob {
        self.seal_to(data, &self.measurement)
    }

    fn seal_to(&self, data: &[u8], m: &Measurement) -> SealedBlob {
        let nonce = crypto::random_bytes::<12>();
        let ciphertext = crypto::aead_encrypt(&self.seal_key(m), &nonce, m.as_bytes(), data);
        SealedBlob { ciphertext, nonce, bound_measurement: *m }
    }

    pub fn unseal(&self, blob: &SealedBlob) -> Result<Vec<u8>> {
        if blob.bound_measurement != self.measurement {
            return Err(Error::SealViolation);
        }
        let m = self.measurement;
        crypto::aead_decrypt(&self.seal_key(&m), &blob.nonce, m.as_bytes(), &blob.ciphertext)
            .map_err(|_| Error::Integrity("sealed blob tag mismatch".into()))
    }

    pub fn seal_to_file(&self, path: &Path, data: &[u8]) -> Result<()> {
        durable::atomic_write(path, &self.seal(data).to_bytes())
    }

    /// `Ok(None)` when the file does not exist.
    pub fn unseal_file(&self, path: &Path) -> Result<Option<Vec<u8>>> {
        match fs::read(path) {
            Ok(bytes) => Ok(Some(self.unseal(&SealedBlob::from_bytes(&bytes)?)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}

/// Replay-protected counter persisted as 8 big-endian bytes.
pub struct MonotonicCounter {
    path: PathBuf,
    value: Mutex<u64>,
}

impl MonotonicCounter {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let value = match fs::read(&path) {
            Ok(bytes) => {
                let arr: [u8; 8] = bytes
                    .as_slice()
                    .try_into()
                    .map_err(|_| Error::Integrity(format!("counter file {} is not 8 bytes", path.display())))?;
                u64::from_be_bytes(arr)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                durable::atomic_write(&path, &0u64.to_be_bytes())?;
                0
            }
            Err(e) => return Err(e.into()),
        };
        Ok(Self { path, value: Mutex::new(value) })
    }

    pub fn read(&self) -> u64 {
        *self.value.lock()
    }

    /// Returns the new value only after it is durable.
    pub fn increment(&self) -> Result<u64> {
        let mut guard = self.value.lock();
        let next = *guard + 1;
        durable::atomic_write(&self.path, &next.to_be_bytes())?;
        *guard = next;
        Ok(next)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub type SharedEnclave = Arc<Enclave>;

/// One accepted release in a transparency pin file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PinnedRelease {
    pub measurement: Measurement,
    pub released_at: u64,
}

impl PinnedRelease {
    pub fn to_line(&self) -> String {
        format!("{} {}", self.measurement.to_hex(), iso8601(self.released_at))
    }
}

/// Parses `<hex measurement> <iso8601 timestamp>` lines. Blank lines, `#`
/// comments and `anchor ...` lines (the audit anchors share the file) are
/// skipped.
pub fn parse_pins(text: &str) -> Result<Vec<PinnedRelease>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("anchor ") {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(m), Some(ts), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Config { line: i + 1, message: "expected `<hex measurement> <timestamp>`".into() });
        };
        let measurement = Measurement::from_hex(m)
            .ok_or_else(|| Error::Config { line: i + 1, message: "measurement must be 64 hex chars".into() })?;
        let released_at = parse_iso8601(ts)
            .ok_or_else(|| Error::Config { line: i + 1, message: format!("bad timestamp {ts}") })?;
        out.push(PinnedRelease { measurement, released_at });
    }
    Ok(out)
}
