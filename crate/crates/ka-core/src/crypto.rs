//! Key generation, signing, passphrases, PSE sealing and key wiping.
//!
//! Everything sits behind [`CryptoProvider`] so that a hardware-like
//! provider (one that refuses to export private material) can replace the
//! default software provider without touching callers. The provider
//! contract includes: fresh keys pass a sign/verify self-test before they
//! are released, and the public part alone never suffices to reconstruct
//! the private part.
//!
//! Private key bytes live in [`SecretBytes`], which overwrites its buffer
//! before the memory is released, both on [`KeyMaterial::wipe`] and on
//! drop.

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signer, Verifier};
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;
use zeroize::Zeroize;

use crate::store::canonical::{self, DocBuilder, Value};
use crate::types::{ContainerId, KeyId, ParticipantId, Timestamp};

#[derive(Debug, Error, PartialEq)]
pub enum CryptoError {
    #[error("unsupported algorithm: {0}")]
    UnsupportedAlgorithm(String),
    #[error("parameters below configured minimum strength ({strength} < {floor} bits)")]
    WeakParameters { strength: u32, floor: u32 },
    #[error("randomness source failed its health check")]
    RngFailure,
    #[error("private key material is not available")]
    PrivateKeyUnavailable,
    #[error("passphrase policy too weak ({entropy_bits:.1} < {floor:.1} bits)")]
    PolicyTooWeak { entropy_bits: f64, floor: f64 },
    #[error("authentication failed (wrong passphrase or tampered container)")]
    AuthenticationFailed,
    #[error("malformed container: {0}")]
    MalformedContainer(String),
}

/// Byte buffer that is overwritten before its memory is released.
#[derive(Clone, PartialEq, Eq, Zeroize, zeroize::ZeroizeOnDrop)]
pub struct SecretBytes(Vec<u8>);

impl SecretBytes {
    pub fn new(bytes: Vec<u8>) -> Self {
        SecretBytes(bytes)
    }

    pub fn expose(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Overwrite the buffer in place. Unlike dropping, the length is kept,
    /// so the wipe is observable.
    pub fn zero_in_place(&mut self) {
        self.0.as_mut_slice().zeroize();
    }
}

impl fmt::Debug for SecretBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SecretBytes({} bytes, redacted)", self.0.len())
    }
}

/// One key pair as held in memory. `private_part` is present only while
/// the owning instance is storable or the material was just unsealed; it
/// is wiped before release.
#[derive(Clone, Debug)]
pub struct KeyMaterial {
    pub key_id: KeyId,
    pub algorithm: String,
    pub public_part: Vec<u8>,
    pub private_part: Option<SecretBytes>,
    pub created_at: Timestamp,
    /// Whether the holding token permits exporting the private part.
    pub exportable: bool,
}

impl KeyMaterial {
    pub fn has_private(&self) -> bool {
        self.private_part.is_some()
    }

    /// Overwrite the private material and mark it absent. Idempotent.
    pub fn wipe(&mut self) {
        if let Some(secret) = self.private_part.as_mut() {
            secret.zero_in_place();
        }
        self.private_part = None;
    }
}

/// Draws from the source and rejects obviously broken ones (stuck or
/// all-zero output). A healthy source fails this with probability ~2^-500.
pub fn rng_health_check(rng: &mut dyn RngCore) -> Result<(), CryptoError> {
    let mut a = [0u8; 32];
    let mut b = [0u8; 32];
    rng.try_fill_bytes(&mut a).map_err(|_| CryptoError::RngFailure)?;
    rng.try_fill_bytes(&mut b).map_err(|_| CryptoError::RngFailure)?;
    let stuck = |buf: &[u8; 32]| buf.iter().all(|&x| x == buf[0]);
    if a == b || stuck(&a) || stuck(&b) {
        return Err(CryptoError::RngFailure);
    }
    Ok(())
}

/// Provider boundary. The engine never touches raw curve operations
/// directly; an HSM-like provider can refuse private-part export entirely.
pub trait CryptoProvider: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether keys generated by this provider may have their private part
    /// exported (drives the lifecycle copy-source capability).
    fn exportable(&self) -> bool;

    /// Effective security level of an algorithm, if supported.
    fn strength_bits(&self, algorithm: &str) -> Option<u32>;

    fn generate_keypair(
        &self,
        key_id: KeyId,
        algorithm: &str,
        rng: &mut dyn RngCore,
        now: Timestamp,
    ) -> Result<KeyMaterial, CryptoError>;

    fn sign(&self, key: &KeyMaterial, message: &[u8]) -> Result<Vec<u8>, CryptoError>;

    fn verify(&self, algorithm: &str, public_part: &[u8], message: &[u8], signature: &[u8])
        -> bool;
}

pub const ALG_ED25519: &str = "ed25519";

/// Default software provider: Ed25519 signatures, export allowed.
pub struct SoftwareProvider {
    min_strength_bits: u32,
    exportable: bool,
}

impl Default for SoftwareProvider {
    fn default() -> Self {
        SoftwareProvider {
            min_strength_bits: 128,
            exportable: true,
        }
    }
}

impl SoftwareProvider {
    pub fn new(min_strength_bits: u32, exportable: bool) -> Self {
        SoftwareProvider {
            min_strength_bits,
            exportable,
        }
    }

    /// Hardware-like variant that refuses private-part export.
    pub fn sealed() -> Self {
        SoftwareProvider {
            min_strength_bits: 128,
            exportable: false,
        }
    }
}

impl CryptoProvider for SoftwareProvider {
    fn name(&self) -> &'static str {
        "software"
    }

    fn exportable(&self) -> bool {
        self.exportable
    }

    fn strength_bits(&self, algorithm: &str) -> Option<u32> {
        match algorithm {
            ALG_ED25519 => Some(128),
            _ => None,
        }
    }

    fn generate_keypair(
        &self,
        key_id: KeyId,
        algorithm: &str,
        rng: &mut dyn RngCore,
        now: Timestamp,
    ) -> Result<KeyMaterial, CryptoError> {
        let strength = self
            .strength_bits(algorithm)
            .ok_or_else(|| CryptoError::UnsupportedAlgorithm(algorithm.to_owned()))?;
        if strength < self.min_strength_bits {
            return Err(CryptoError::WeakParameters {
                strength,
                floor: self.min_strength_bits,
            });
        }
        rng_health_check(rng)?;
        let mut seed = [0u8; 32];
        rng.try_fill_bytes(&mut seed).map_err(|_| CryptoError::RngFailure)?;
        let signing = ed25519_dalek::SigningKey::from_bytes(&seed);
        let material = KeyMaterial {
            key_id,
            algorithm: algorithm.to_owned(),
            public_part: signing.verifying_key().to_bytes().to_vec(),
            private_part: Some(SecretBytes::new(seed.to_vec())),
            created_at: now,
            exportable: self.exportable,
        };
        seed.zeroize();
        // Self-test before the key is released.
        let probe = b"keygen self-test";
        let signature = self.sign(&material, probe)?;
        if !self.verify(algorithm, &material.public_part, probe, &signature) {
            return Err(CryptoError::RngFailure);
        }
        Ok(material)
    }

    fn sign(&self, key: &KeyMaterial, message: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if key.algorithm != ALG_ED25519 {
            return Err(CryptoError::UnsupportedAlgorithm(key.algorithm.clone()));
        }
        let secret = key
            .private_part
            .as_ref()
            .ok_or(CryptoError::PrivateKeyUnavailable)?;
        let seed: [u8; 32] = secret
            .expose()
            .try_into()
            .map_err(|_| CryptoError::PrivateKeyUnavailable)?;
        let signing = ed25519_dalek::SigningKey::from_bytes(&seed);
        Ok(signing.sign(message).to_bytes().to_vec())
    }

    fn verify(
        &self,
        algorithm: &str,
        public_part: &[u8],
        message: &[u8],
        signature: &[u8],
    ) -> bool {
        if algorithm != ALG_ED25519 {
            return false;
        }
        let Ok(public): Result<[u8; 32], _> = public_part.try_into() else {
            return false;
        };
        let Ok(key) = ed25519_dalek::VerifyingKey::from_bytes(&public) else {
            return false;
        };
        let Ok(sig): Result<[u8; 64], _> = signature.try_into() else {
            return false;
        };
        key.verify(message, &ed25519_dalek::Signature::from_bytes(&sig))
            .is_ok()
    }
}

/// 64 symbols → 6 bits per character.
pub const DEFAULT_ALPHABET: &str =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_";

/// Alphabet and length for generated passphrases.
#[derive(Clone, Debug, PartialEq)]
pub struct PassphrasePolicy {
    pub alphabet: String,
    pub length: usize,
    pub min_entropy_bits: f64,
}

impl Default for PassphrasePolicy {
    fn default() -> Self {
        // 16 chars over 64 symbols = 96 bits, comfortably over the 80-bit
        // floor.
        PassphrasePolicy {
            alphabet: DEFAULT_ALPHABET.to_owned(),
            length: 16,
            min_entropy_bits: 80.0,
        }
    }
}

impl PassphrasePolicy {
    /// Distinct symbols; duplicates would skew the distribution, so they
    /// do not count.
    pub fn distinct_symbols(&self) -> Vec<char> {
        let mut seen = std::collections::BTreeSet::new();
        self.alphabet.chars().filter(|c| seen.insert(*c)).collect()
    }

    pub fn entropy_bits(&self) -> f64 {
        let symbols = self.distinct_symbols().len();
        if symbols < 2 {
            return 0.0;
        }
        self.length as f64 * (symbols as f64).log2()
    }
}

/// A generated passphrase; the secret is zeroized on drop.
pub struct Passphrase {
    secret: String,
    entropy_bits: f64,
}

impl Passphrase {
    pub fn secret(&self) -> &str {
        &self.secret
    }

    pub fn entropy_bits(&self) -> f64 {
        self.entropy_bits
    }
}

impl Drop for Passphrase {
    fn drop(&mut self) {
        self.secret.zeroize();
    }
}

impl fmt::Debug for Passphrase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Passphrase({:.1} bits, redacted)", self.entropy_bits)
    }
}

/// Draw a passphrase uniformly over the policy's alphabet.
pub fn generate_passphrase(
    policy: &PassphrasePolicy,
    rng: &mut dyn RngCore,
) -> Result<Passphrase, CryptoError> {
    let entropy_bits = policy.entropy_bits();
    if entropy_bits < policy.min_entropy_bits {
        return Err(CryptoError::PolicyTooWeak {
            entropy_bits,
            floor: policy.min_entropy_bits,
        });
    }
    let symbols = policy.distinct_symbols();
    let mut secret = String::with_capacity(policy.length);
    for _ in 0..policy.length {
        // Rejection sampling keeps the draw unbiased.
        let bound = (u32::MAX / symbols.len() as u32) * symbols.len() as u32;
        let idx = loop {
            let r = rng.next_u32();
            if r < bound {
                break (r % symbols.len() as u32) as usize;
            }
        };
        secret.push(symbols[idx]);
    }
    Ok(Passphrase {
        secret,
        entropy_bits,
    })
}

/// Key-derivation parameters, recorded in every PSE header so containers
/// are self-describing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KdfParams {
    pub algorithm: String,
    pub memory_kib: u32,
    pub iterations: u32,
    pub parallelism: u32,
}

pub const KDF_ARGON2ID: &str = "argon2id";

impl Default for KdfParams {
    fn default() -> Self {
        KdfParams {
            algorithm: KDF_ARGON2ID.to_owned(),
            memory_kib: 19_456,
            iterations: 2,
            parallelism: 1,
        }
    }
}

impl KdfParams {
    /// Cheap parameters for scripted runs; the header records them, so a
    /// container remains self-describing either way.
    pub fn light() -> Self {
        KdfParams {
            algorithm: KDF_ARGON2ID.to_owned(),
            memory_kib: 64,
            iterations: 1,
            parallelism: 1,
        }
    }
}

fn derive_kdf_key(
    kdf: &KdfParams,
    passphrase: &str,
    salt: &[u8],
) -> Result<[u8; 32], CryptoError> {
    if kdf.algorithm != KDF_ARGON2ID {
        return Err(CryptoError::MalformedContainer(format!(
            "unknown kdf {:?}",
            kdf.algorithm
        )));
    }
    let params = argon2::Params::new(kdf.memory_kib, kdf.iterations, kdf.parallelism, Some(32))
        .map_err(|e| CryptoError::MalformedContainer(format!("bad kdf parameters: {e}")))?;
    let argon = argon2::Argon2::new(argon2::Algorithm::Argon2id, argon2::Version::V0x13, params);
    let mut out = [0u8; 32];
    argon
        .hash_password_into(passphrase.as_bytes(), salt, &mut out)
        .map_err(|e| CryptoError::MalformedContainer(format!("kdf failed: {e}")))?;
    Ok(out)
}

pub const CIPHER_CHACHA20POLY1305: &str = "chacha20poly1305";

/// Self-describing sealing parameters of a PSE.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseHeader {
    pub kdf: KdfParams,
    pub cipher: String,
    pub salt: Vec<u8>,
    pub nonce: Vec<u8>,
}

/// Personal security environment: a passphrase-sealed container carrying
/// one private key to its subject. Opening with the right passphrase
/// yields the original material bit-exactly; any wrong passphrase or any
/// flipped bit is rejected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pse {
    pub container_id: ContainerId,
    pub subject: ParticipantId,
    pub header: PseHeader,
    pub sealed_payload: Vec<u8>,
}

fn key_material_doc(key: &KeyMaterial, private: &[u8]) -> Value {
    DocBuilder::new()
        .text("algorithm", key.algorithm.clone())
        .int("created_at", key.created_at.as_secs())
        .int("exportable", key.exportable as i64)
        .text("key_id", key.key_id.as_str())
        .bytes("private", private)
        .bytes("public", key.public_part.clone())
        .build()
}

fn key_material_from_doc(doc: &Value) -> Result<KeyMaterial, CryptoError> {
    let get = |field: &str| {
        doc.field(field)
            .map_err(|e| CryptoError::MalformedContainer(e.to_string()))
    };
    let bad = |what: &str| CryptoError::MalformedContainer(format!("bad field {what:?}"));
    Ok(KeyMaterial {
        key_id: KeyId::new(get("key_id")?.as_text().ok_or_else(|| bad("key_id"))?),
        algorithm: get("algorithm")?
            .as_text()
            .ok_or_else(|| bad("algorithm"))?
            .to_owned(),
        public_part: get("public")?.as_bytes().ok_or_else(|| bad("public"))?.to_vec(),
        private_part: Some(SecretBytes::new(
            get("private")?.as_bytes().ok_or_else(|| bad("private"))?.to_vec(),
        )),
        created_at: Timestamp(get("created_at")?.as_int().ok_or_else(|| bad("created_at"))?),
        exportable: get("exportable")?.as_int().ok_or_else(|| bad("exportable"))? != 0,
    })
}

/// Everything the seal authenticates besides the payload: identity plus the
/// full header, so no recorded parameter can be swapped.
fn pse_aad(container_id: &ContainerId, subject: &ParticipantId, header: &PseHeader) -> Vec<u8> {
    let doc = DocBuilder::new()
        .text("cipher", header.cipher.clone())
        .text("container_id", container_id.as_str())
        .text("kdf", header.kdf.algorithm.clone())
        .int("kdf_iterations", header.kdf.iterations as i64)
        .int("kdf_memory_kib", header.kdf.memory_kib as i64)
        .int("kdf_parallelism", header.kdf.parallelism as i64)
        .bytes("nonce", header.nonce.clone())
        .bytes("salt", header.salt.clone())
        .text("subject", subject.as_str())
        .build();
    canonical::encode(&doc)
}

/// Seal key material into a PSE under a passphrase.
pub fn seal_pse(
    key: &KeyMaterial,
    passphrase: &str,
    subject: ParticipantId,
    container_id: ContainerId,
    kdf: &KdfParams,
    rng: &mut dyn RngCore,
) -> Result<Pse, CryptoError> {
    let private = key
        .private_part
        .as_ref()
        .ok_or(CryptoError::PrivateKeyUnavailable)?;
    let mut salt = vec![0u8; 16];
    let mut nonce = vec![0u8; 12];
    rng.try_fill_bytes(&mut salt).map_err(|_| CryptoError::RngFailure)?;
    rng.try_fill_bytes(&mut nonce).map_err(|_| CryptoError::RngFailure)?;
    let header = PseHeader {
        kdf: kdf.clone(),
        cipher: CIPHER_CHACHA20POLY1305.to_owned(),
        salt,
        nonce,
    };
    let mut sealing_key = derive_kdf_key(&header.kdf, passphrase, &header.salt)?;
    let aead = ChaCha20Poly1305::new(Key::from_slice(&sealing_key));
    let mut plaintext = canonical::encode(&key_material_doc(key, private.expose()));
    let sealed_payload = aead
        .encrypt(
            Nonce::from_slice(&header.nonce),
            Payload {
                msg: &plaintext,
                aad: &pse_aad(&container_id, &subject, &header),
            },
        )
        .map_err(|_| CryptoError::AuthenticationFailed)?;
    plaintext.zeroize();
    sealing_key.zeroize();
    Ok(Pse {
        container_id,
        subject,
        header,
        sealed_payload,
    })
}

/// Open a PSE. Fails without revealing anything on a wrong passphrase or
/// any tampering with header or payload.
pub fn open_pse(pse: &Pse, passphrase: &str) -> Result<KeyMaterial, CryptoError> {
    if pse.header.cipher != CIPHER_CHACHA20POLY1305 {
        return Err(CryptoError::MalformedContainer(format!(
            "unknown cipher {:?}",
            pse.header.cipher
        )));
    }
    if pse.header.nonce.len() != 12 {
        return Err(CryptoError::MalformedContainer("bad nonce length".into()));
    }
    let mut sealing_key = derive_kdf_key(&pse.header.kdf, passphrase, &pse.header.salt)?;
    let aead = ChaCha20Poly1305::new(Key::from_slice(&sealing_key));
    let mut plaintext = aead
        .decrypt(
            Nonce::from_slice(&pse.header.nonce),
            Payload {
                msg: &pse.sealed_payload,
                aad: &pse_aad(&pse.container_id, &pse.subject, &pse.header),
            },
        )
        .map_err(|_| CryptoError::AuthenticationFailed)?;
    sealing_key.zeroize();
    let doc = canonical::decode(&plaintext)
        .map_err(|e| CryptoError::MalformedContainer(e.to_string()))?;
    let material = key_material_from_doc(&doc);
    plaintext.zeroize();
    material
}

/// Derive a 32-byte wrapping key from a root secret and a context label.
pub fn derive_wrap_key(root_secret: &[u8], context: &[u8]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"ka-wrap-v1");
    hasher.update((context.len() as u64).to_be_bytes());
    hasher.update(context);
    hasher.update(root_secret);
    hasher.finalize().into()
}

/// Authenticated wrap of a secret under a derived key.
pub fn wrap_secret(
    wrap_key: &[u8; 32],
    nonce: &[u8; 12],
    plaintext: &[u8],
    aad: &[u8],
) -> Vec<u8> {
    let aead = ChaCha20Poly1305::new(Key::from_slice(wrap_key));
    aead.encrypt(
        Nonce::from_slice(nonce),
        Payload {
            msg: plaintext,
            aad,
        },
    )
    .expect("chacha20poly1305 encryption cannot fail")
}

/// Inverse of [`wrap_secret`]; detects any bit flip in ciphertext or aad.
pub fn unwrap_secret(
    wrap_key: &[u8; 32],
    nonce: &[u8; 12],
    ciphertext: &[u8],
    aad: &[u8],
) -> Result<SecretBytes, CryptoError> {
    let aead = ChaCha20Poly1305::new(Key::from_slice(wrap_key));
    let plaintext = aead
        .decrypt(
            Nonce::from_slice(nonce),
            Payload {
                msg: ciphertext,
                aad,
            },
        )
        .map_err(|_| CryptoError::AuthenticationFailed)?;
    Ok(SecretBytes::new(plaintext))
}
