//! Software keystore with non-exportable signing keys, revocation, and
//! weighted key rotation.
//!
//! Private key material lives only inside [`Keystore`]; no method returns it.
//! On disk, each private key is sealed with ChaCha20-Poly1305 under a key
//! derived from a passphrase with PBKDF2-HMAC-SHA256.
//!
//! Revocation and signing share one lock: `sign` holds a read guard for the
//! whole operation and `revoke` takes the write guard, so once `revoke`
//! returns no later `sign` call on that key can succeed.

use std::collections::BTreeMap;
use std::fmt;
use std::num::NonZeroU32;
use std::path::Path;
use std::sync::{PoisonError, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use ring::aead::{self, Aad, LessSafeKey, Nonce, UnboundKey, CHACHA20_POLY1305};
use ring::rand::{SecureRandom, SystemRandom};
use ring::signature::{
    EcdsaKeyPair, Ed25519KeyPair, KeyPair, UnparsedPublicKey, ECDSA_P256_SHA256_FIXED,
    ECDSA_P256_SHA256_FIXED_SIGNING, ED25519,
};
use serde::{Deserialize, Serialize};
use zeroize::Zeroizing;

use crate::fsutil;
use crate::manifest::{self, Manifest, ManifestDigest, ManifestError};

pub const DEFAULT_KDF_ITERATIONS: u32 = 100_000;
const KEYSTORE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum KeystoreError {
    #[error("key id `{0}` already exists")]
    DuplicateKeyId(String),
    #[error("unknown key id `{0}`")]
    UnknownKey(String),
    #[error("key `{0}` is revoked")]
    KeyRevoked(String),
    #[error("no usable (unrevoked) key available for selection")]
    NoUsableKey,
    #[error("invalid rotation policy: {0}")]
    InvalidRotation(String),
    #[error("cryptographic failure: {0}")]
    Crypto(String),
    #[error("keystore file is corrupt or the passphrase is wrong")]
    Unseal,
    #[error("keystore format error: {0}")]
    Format(String),
    #[error("keystore I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignatureScheme {
    /// ECDSA over NIST P-256 with SHA-256, fixed-width 64-byte signatures.
    #[default]
    EcdsaP256,
    Ed25519,
}

impl SignatureScheme {
    pub fn signature_len(&self) -> usize {
        64
    }

    fn verification_alg(&self) -> &'static dyn ring::signature::VerificationAlgorithm {
        match self {
            SignatureScheme::EcdsaP256 => &ECDSA_P256_SHA256_FIXED,
            SignatureScheme::Ed25519 => &ED25519,
        }
    }
}

impl fmt::Display for SignatureScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SignatureScheme::EcdsaP256 => "ecdsa-p256",
            SignatureScheme::Ed25519 => "ed25519",
        })
    }
}

/// Raw signature bytes.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Signature(Vec<u8>);

impl Signature {
    pub fn from_bytes(bytes: impl Into<Vec<u8>>) -> Self {
        Self(bytes.into())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        hex::decode(s).map(Self)
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", self.to_hex())
    }
}

/// Public view of a key. Carries no private material.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KeyHandle {
    pub key_id: String,
    pub scheme: SignatureScheme,
    #[serde(with = "hex_bytes")]
    pub public_key: Vec<u8>,
    pub created_at: u64,
    pub revoked: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    SignatureInvalid,
    KeyRevoked,
    UnknownKey,
}

impl RejectReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectReason::SignatureInvalid => "signature-invalid",
            RejectReason::KeyRevoked => "key-revoked",
            RejectReason::UnknownKey => "unknown-key",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

impl Verdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept)
    }
}

enum SigningKey {
    Ecdsa(EcdsaKeyPair),
    Ed25519(Ed25519KeyPair),
}

struct KeyEntry {
    handle: KeyHandle,
    signer: SigningKey,
    // PKCS#8 for ECDSA, the 32-byte seed for Ed25519. Only used for sealing.
    secret: Zeroizing<Vec<u8>>,
}

impl KeyEntry {
    fn from_secret(
        key_id: &str,
        scheme: SignatureScheme,
        secret: Zeroizing<Vec<u8>>,
        created_at: u64,
        revoked: bool,
        rng: &SystemRandom,
    ) -> Result<Self, KeystoreError> {
        let signer = match scheme {
            SignatureScheme::EcdsaP256 => SigningKey::Ecdsa(
                EcdsaKeyPair::from_pkcs8(&ECDSA_P256_SHA256_FIXED_SIGNING, &secret, rng)
                    .map_err(|e| KeystoreError::Crypto(e.to_string()))?,
            ),
            SignatureScheme::Ed25519 => SigningKey::Ed25519(
                Ed25519KeyPair::from_seed_unchecked(&secret)
                    .map_err(|e| KeystoreError::Crypto(e.to_string()))?,
            ),
        };
        let public_key = match &signer {
            SigningKey::Ecdsa(k) => k.public_key().as_ref().to_vec(),
            SigningKey::Ed25519(k) => k.public_key().as_ref().to_vec(),
        };
        Ok(Self {
            handle: KeyHandle {
                key_id: key_id.to_string(),
                scheme,
                public_key,
                created_at,
                revoked,
            },
            signer,
            secret,
        })
    }
}

/// In-process stand-in for a hardware security module.
pub struct Keystore {
    default_scheme: SignatureScheme,
    kdf_iterations: u32,
    keys: RwLock<BTreeMap<String, KeyEntry>>,
    rng: SystemRandom,
}

impl fmt::Debug for Keystore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Keystore")
            .field("default_scheme", &self.default_scheme)
            .field("keys", &self.list())
            .finish()
    }
}

impl Default for Keystore {
    fn default() -> Self {
        Self::new(SignatureScheme::default())
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl Keystore {
    pub fn new(default_scheme: SignatureScheme) -> Self {
        Self {
            default_scheme,
            kdf_iterations: DEFAULT_KDF_ITERATIONS,
            keys: RwLock::new(BTreeMap::new()),
            rng: SystemRandom::new(),
        }
    }

    /// Sets the PBKDF2 iteration count used by [`Keystore::save`].
    pub fn with_kdf_iterations(mut self, iterations: u32) -> Self {
        self.kdf_iterations = iterations.max(1);
        self
    }

    pub fn default_scheme(&self) -> SignatureScheme {
        self.default_scheme
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, BTreeMap<String, KeyEntry>> {
        self.keys.read().unwrap_or_else(PoisonError::into_inner)
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, BTreeMap<String, KeyEntry>> {
        self.keys.write().unwrap_or_else(PoisonError::into_inner)
    }

    pub fn keygen(&self, key_id: &str) -> Result<KeyHandle, KeystoreError> {
        self.keygen_with_scheme(key_id, self.default_scheme)
    }

    pub fn keygen_with_scheme(
        &self,
        key_id: &str,
        scheme: SignatureScheme,
    ) -> Result<KeyHandle, KeystoreError> {
        let secret = match scheme {
            SignatureScheme::EcdsaP256 => {
                let doc = EcdsaKeyPair::generate_pkcs8(&ECDSA_P256_SHA256_FIXED_SIGNING, &self.rng)
                    .map_err(|e| KeystoreError::Crypto(e.to_string()))?;
                Zeroizing::new(doc.as_ref().to_vec())
            }
            SignatureScheme::Ed25519 => {
                let mut seed = Zeroizing::new(vec![0u8; 32]);
                self.rng
                    .fill(&mut seed)
                    .map_err(|e| KeystoreError::Crypto(e.to_string()))?;
                seed
            }
        };
        self.insert(key_id, scheme, secret)
    }

    /// Ed25519 key derived from a caller-supplied RNG, for reproducible runs.
    pub fn keygen_seeded<R: Rng + ?Sized>(
        &self,
        key_id: &str,
        rng: &mut R,
    ) -> Result<KeyHandle, KeystoreError> {
        let mut seed = Zeroizing::new(vec![0u8; 32]);
        rng.fill(&mut seed[..]);
        self.insert(key_id, SignatureScheme::Ed25519, seed)
    }

    fn insert(
        &self,
        key_id: &str,
        scheme: SignatureScheme,
        secret: Zeroizing<Vec<u8>>,
    ) -> Result<KeyHandle, KeystoreError> {
        let mut keys = self.write();
        if keys.contains_key(key_id) {
            return Err(KeystoreError::DuplicateKeyId(key_id.to_string()));
        }
        let entry = KeyEntry::from_secret(key_id, scheme, secret, now_ms(), false, &self.rng)?;
        let handle = entry.handle.clone();
        keys.insert(key_id.to_string(), entry);
        Ok(handle)
    }

    pub fn handle(&self, key_id: &str) -> Option<KeyHandle> {
        self.read().get(key_id).map(|e| e.handle.clone())
    }

    pub fn list(&self) -> Vec<KeyHandle> {
        self.read().values().map(|e| e.handle.clone()).collect()
    }

    pub fn is_usable(&self, key_id: &str) -> bool {
        self.read().get(key_id).is_some_and(|e| !e.handle.revoked)
    }

    /// Signs a manifest digest.
    pub fn sign(&self, digest: &ManifestDigest, key_id: &str) -> Result<Signature, KeystoreError> {
        let keys = self.read();
        let entry = keys
            .get(key_id)
            .ok_or_else(|| KeystoreError::UnknownKey(key_id.to_string()))?;
        if entry.handle.revoked {
            return Err(KeystoreError::KeyRevoked(key_id.to_string()));
        }
        let sig = match &entry.signer {
            SigningKey::Ecdsa(k) => k
                .sign(&self.rng, digest.as_bytes())
                .map_err(|e| KeystoreError::Crypto(e.to_string()))?
                .as_ref()
                .to_vec(),
            SigningKey::Ed25519(k) => k.sign(digest.as_bytes()).as_ref().to_vec(),
        };
        Ok(Signature(sig))
    }

    /// Digest + sign in one step.
    pub fn sign_manifest(
        &self,
        manifest: &Manifest,
        key_id: &str,
    ) -> Result<SignedManifest, SignManifestError> {
        let digest = manifest.digest()?;
        let signature = self.sign(&digest, key_id)?;
        Ok(SignedManifest {
            manifest: manifest.clone(),
            digest,
            signature,
            key_id: key_id.to_string(),
        })
    }

    /// Accepts iff the key exists, is not revoked, and the signature is valid.
    pub fn verify(&self, digest: &ManifestDigest, signature: &[u8], key_id: &str) -> Verdict {
        let keys = self.read();
        let Some(entry) = keys.get(key_id) else {
            return Verdict::Reject(RejectReason::UnknownKey);
        };
        if entry.handle.revoked {
            return Verdict::Reject(RejectReason::KeyRevoked);
        }
        let pk = UnparsedPublicKey::new(
            entry.handle.scheme.verification_alg(),
            &entry.handle.public_key,
        );
        match pk.verify(digest.as_bytes(), signature) {
            Ok(()) => Verdict::Accept,
            Err(_) => Verdict::Reject(RejectReason::SignatureInvalid),
        }
    }

    pub fn revoke(&self, key_id: &str) -> Result<(), KeystoreError> {
        let mut keys = self.write();
        let entry = keys
            .get_mut(key_id)
            .ok_or_else(|| KeystoreError::UnknownKey(key_id.to_string()))?;
        entry.handle.revoked = true;
        Ok(())
    }

    /// Draws a key according to `policy`, restricted to live keys.
    pub fn select_key<R: Rng + ?Sized>(
        &self,
        policy: &RotationPolicy,
        rng: &mut R,
    ) -> Result<String, KeystoreError> {
        let keys = self.read();
        policy
            .sample(|id| keys.get(id).is_some_and(|e| !e.handle.revoked), rng)
            .map(str::to_string)
            .ok_or(KeystoreError::NoUsableKey)
    }

    /// Writes the keystore, sealing each private key under `passphrase`.
    pub fn save(&self, path: impl AsRef<Path>, passphrase: &[u8]) -> Result<(), KeystoreError> {
        let mut salt = [0u8; 16];
        self.rng
            .fill(&mut salt)
            .map_err(|e| KeystoreError::Crypto(e.to_string()))?;
        let iterations = self.kdf_iterations;
        let sealing_key = derive_key(passphrase, &salt, iterations)?;
        let keys = self.read();
        let mut records = Vec::with_capacity(keys.len());
        for entry in keys.values() {
            let mut nonce = [0u8; aead::NONCE_LEN];
            self.rng
                .fill(&mut nonce)
                .map_err(|e| KeystoreError::Crypto(e.to_string()))?;
            let mut buf = entry.secret.to_vec();
            sealing_key
                .seal_in_place_append_tag(
                    Nonce::assume_unique_for_key(nonce),
                    Aad::from(entry.handle.key_id.as_bytes()),
                    &mut buf,
                )
                .map_err(|e| KeystoreError::Crypto(e.to_string()))?;
            records.push(KeyRecord {
                key_id: entry.handle.key_id.clone(),
                scheme: entry.handle.scheme,
                public_key: hex::encode(&entry.handle.public_key),
                created_at: entry.handle.created_at,
                revoked: entry.handle.revoked,
                sealed_private: SealedSecret {
                    nonce: hex::encode(nonce),
                    ciphertext: hex::encode(buf),
                },
            });
        }
        let file = KeystoreFile {
            version: KEYSTORE_VERSION,
            default_scheme: self.default_scheme,
            kdf: KdfParams {
                algorithm: "pbkdf2-hmac-sha256".into(),
                iterations,
                salt: hex::encode(salt),
            },
            keys: records,
        };
        let json = serde_json::to_vec_pretty(&file)
            .map_err(|e| KeystoreError::Format(e.to_string()))?;
        fsutil::write_atomic(path, &json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, passphrase: &[u8]) -> Result<Self, KeystoreError> {
        let text = std::fs::read(path)?;
        let file: KeystoreFile =
            serde_json::from_slice(&text).map_err(|e| KeystoreError::Format(e.to_string()))?;
        if file.version != KEYSTORE_VERSION {
            return Err(KeystoreError::Format(format!("unsupported version {}", file.version)));
        }
        if file.kdf.algorithm != "pbkdf2-hmac-sha256" {
            return Err(KeystoreError::Format(format!("unsupported kdf {}", file.kdf.algorithm)));
        }
        let salt = hex::decode(&file.kdf.salt).map_err(|e| KeystoreError::Format(e.to_string()))?;
        let sealing_key = derive_key(passphrase, &salt, file.kdf.iterations)?;
        let store = Self::new(file.default_scheme).with_kdf_iterations(file.kdf.iterations);
        {
            let mut keys = store.write();
            for rec in file.keys {
                let nonce: [u8; aead::NONCE_LEN] = hex::decode(&rec.sealed_private.nonce)
                    .ok()
                    .and_then(|v| v.try_into().ok())
                    .ok_or_else(|| KeystoreError::Format("bad nonce".into()))?;
                let mut buf = Zeroizing::new(
                    hex::decode(&rec.sealed_private.ciphertext)
                        .map_err(|e| KeystoreError::Format(e.to_string()))?,
                );
                let plain = sealing_key
                    .open_in_place(
                        Nonce::assume_unique_for_key(nonce),
                        Aad::from(rec.key_id.as_bytes()),
                        &mut buf,
                    )
                    .map_err(|_| KeystoreError::Unseal)?;
                let secret = Zeroizing::new(plain.to_vec());
                let entry = KeyEntry::from_secret(
                    &rec.key_id,
                    rec.scheme,
                    secret,
                    rec.created_at,
                    rec.revoked,
                    &store.rng,
                )?;
                if hex::encode(&entry.handle.public_key) != rec.public_key {
                    return Err(KeystoreError::Format(format!(
                        "public key mismatch for `{}`",
                        rec.key_id
                    )));
                }
                if keys.insert(rec.key_id.clone(), entry).is_some() {
                    return Err(KeystoreError::DuplicateKeyId(rec.key_id));
                }
            }
        }
        Ok(store)
    }
}

fn derive_key(passphrase: &[u8], salt: &[u8], iterations: u32) -> Result<LessSafeKey, KeystoreError> {
    let iterations = NonZeroU32::new(iterations)
        .ok_or_else(|| KeystoreError::Format("kdf iterations must be positive".into()))?;
    let mut key = Zeroizing::new([0u8; 32]);
    ring::pbkdf2::derive(
        ring::pbkdf2::PBKDF2_HMAC_SHA256,
        iterations,
        salt,
        passphrase,
        &mut key[..],
    );
    let unbound = UnboundKey::new(&CHACHA20_POLY1305, &key[..])
        .map_err(|e| KeystoreError::Crypto(e.to_string()))?;
    Ok(LessSafeKey::new(unbound))
}

#[derive(Serialize, Deserialize)]
struct KeystoreFile {
    version: u32,
    default_scheme: SignatureScheme,
    kdf: KdfParams,
    keys: Vec<KeyRecord>,
}

#[derive(Serialize, Deserialize)]
struct KdfParams {
    algorithm: String,
    iterations: u32,
    salt: String,
}

#[derive(Serialize, Deserialize)]
struct KeyRecord {
    key_id: String,
    scheme: SignatureScheme,
    public_key: String,
    created_at: u64,
    revoked: bool,
    sealed_private: SealedSecret,
}

#[derive(Serialize, Deserialize)]
struct SealedSecret {
    nonce: String,
    ciphertext: String,
}

mod hex_bytes {
    use serde::Serializer;

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SignManifestError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Key(#[from] KeystoreError),
}

/// A manifest with the signature produced over its digest.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedManifest {
    manifest: Manifest,
    digest: ManifestDigest,
    signature: Signature,
    key_id: String,
}

impl SignedManifest {
    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn digest(&self) -> &ManifestDigest {
        &self.digest
    }

    pub fn signature(&self) -> &Signature {
        &self.signature
    }

    pub fn key_id(&self) -> &str {
        &self.key_id
    }

    pub fn to_envelope(&self) -> SignedEnvelope {
        SignedEnvelope {
            manifest: String::from_utf8(
                self.manifest.canonical_encode().expect("signed manifests encode"),
            )
            .expect("canonical encoding is UTF-8"),
            digest: self.digest.to_hex(),
            signature: self.signature.to_hex(),
            key_id: self.key_id.clone(),
        }
    }
}

/// Wire form of a signed manifest: one JSON object per line in signed files.
/// Nothing here is trusted until verified.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedEnvelope {
    /// Canonical manifest encoding as text.
    pub manifest: String,
    pub digest: String,
    pub signature: String,
    pub key_id: String,
}

/// An envelope parsed into typed parts, with the digest recomputed from the
/// manifest bytes.
#[derive(Debug, Clone)]
pub struct ParsedEnvelope {
    pub manifest: Manifest,
    pub digest: ManifestDigest,
    pub claimed_digest_matches: bool,
    pub signature: Signature,
    pub key_id: String,
}

impl SignedEnvelope {
    pub fn parse(&self) -> Result<ParsedEnvelope, ManifestError> {
        let manifest = manifest::decode(self.manifest.as_bytes())?;
        let digest = manifest::digest_bytes(self.manifest.as_bytes());
        let claimed_digest_matches = ManifestDigest::from_hex(&self.digest)
            .map(|d| d == digest)
            .unwrap_or(false);
        let signature = Signature::from_hex(&self.signature)
            .map_err(|e| ManifestError::Malformed(format!("signature hex: {e}")))?;
        Ok(ParsedEnvelope {
            manifest,
            digest,
            claimed_digest_matches,
            signature,
            key_id: self.key_id.clone(),
        })
    }
}

/// Per-key selection probabilities `1/K + epsilon_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationPolicy {
    key_ids: Vec<String>,
    offsets: Vec<f64>,
}

impl RotationPolicy {
    pub fn uniform<S: Into<String>>(keys: impl IntoIterator<Item = S>) -> Result<Self, KeystoreError> {
        let key_ids: Vec<String> = keys.into_iter().map(Into::into).collect();
        let offsets = vec![0.0; key_ids.len()];
        Self::new(key_ids, offsets)
    }

    /// `offsets` must sum to zero and keep every probability inside `[0, 1]`.
    pub fn new(key_ids: Vec<String>, offsets: Vec<f64>) -> Result<Self, KeystoreError> {
        if key_ids.is_empty() {
            return Err(KeystoreError::InvalidRotation("no keys".into()));
        }
        if key_ids.len() != offsets.len() {
            return Err(KeystoreError::InvalidRotation("one offset per key required".into()));
        }
        let sum: f64 = offsets.iter().sum();
        if !sum.is_finite() || sum.abs() > 1e-9 {
            return Err(KeystoreError::InvalidRotation(format!("offsets sum to {sum}, not 0")));
        }
        let base = 1.0 / key_ids.len() as f64;
        if let Some(e) = offsets
            .iter()
            .find(|e| !(-1e-12..=1.0 + 1e-12).contains(&(base + **e)))
        {
            return Err(KeystoreError::InvalidRotation(format!(
                "offset {e} leaves probability outside [0, 1]"
            )));
        }
        Ok(Self { key_ids, offsets })
    }

    pub fn key_ids(&self) -> &[String] {
        &self.key_ids
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let base = 1.0 / self.key_ids.len() as f64;
        self.offsets.iter().map(|e| (base + e).clamp(0.0, 1.0)).collect()
    }

    /// Samples among keys for which `usable` holds, renormalizing their
    /// probabilities. `None` if no usable key has positive weight.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        usable: impl Fn(&str) -> bool,
        rng: &mut R,
    ) -> Option<&str> {
        let weights: Vec<f64> = self
            .key_ids
            .iter()
            .zip(self.probabilities())
            .map(|(id, p)| if usable(id) { p } else { 0.0 })
            .collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return None;
        }
        let mut u = rng.random::<f64>() * total;
        let mut last = None;
        for (id, w) in self.key_ids.iter().zip(&weights) {
            if *w <= 0.0 {
                continue;
            }
            last = Some(id.as_str());
            if u < *w {
                return last;
            }
            u -= w;
        }
        last
    }
}
