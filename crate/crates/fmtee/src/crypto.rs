//! Primitive contracts: digest, signatures, key agreement, key derivation, AEAD.
//!
//! Every security property of the rest of the crate reduces to these.
//! The concrete suite is pinned in [`SUITE`]; all golden values in tests
//! and in FORMATS.md cite it. No function here performs I/O.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::ChaCha20Poly1305;
use ed25519_dalek::{Signer, Verifier};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use sha2::{Digest as _, Sha256};
use thiserror::Error;
use zeroize::{Zeroize, ZeroizeOnDrop};

/// The pinned algorithm suite. Changing any component invalidates every
/// golden vector in the test suite and in FORMATS.md.
pub const SUITE: &str = "sha256 / ed25519 / x25519 / hkdf-sha256 / chacha20-poly1305";

pub const DIGEST_LEN: usize = 32;
pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
pub const AEAD_KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;
/// Poly1305 authentication tag appended to every ciphertext.
pub const AEAD_TAG_LEN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    /// Key-exchange public value is not a usable point (zero / low order).
    #[error("rejected public key: not a valid key-exchange public value")]
    RejectedPublicKey,
    /// AEAD authentication failed: key, nonce, ciphertext or associated
    /// data do not match what was sealed.
    #[error("authenticated decryption failed")]
    DecryptFail,
}

/// 32-byte digest value. Equal inputs always produce equal digests.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest256(pub [u8; DIGEST_LEN]);

impl Digest256 {
    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s.trim()).ok()?;
        let arr: [u8; DIGEST_LEN] = bytes.try_into().ok()?;
        Some(Digest256(arr))
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        let arr: [u8; DIGEST_LEN] = bytes.try_into().ok()?;
        Some(Digest256(arr))
    }
}

impl std::fmt::Debug for Digest256 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Digest256({})", self.to_hex())
    }
}

impl std::fmt::Display for Digest256 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// SHA-256 of `data`.
pub fn digest(data: &[u8]) -> Digest256 {
    Digest256(Sha256::digest(data).into())
}

/// SHA-256 over the concatenation of `parts` without materializing it.
pub fn digest_parts(parts: &[&[u8]]) -> Digest256 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest256(h.finalize().into())
}

/// Ed25519 signing key pair. The private half never leaves this struct;
/// only the 32-byte public value is serializable.
pub struct SigningKeyPair {
    signing: ed25519_dalek::SigningKey,
}

impl SigningKeyPair {
    pub fn generate(rng: &mut (impl RngCore + CryptoRng)) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let pair = Self::from_seed(&seed);
        seed.zeroize();
        pair
    }

    /// Deterministic construction, used for golden vectors and key files.
    pub fn from_seed(seed: &[u8; 32]) -> Self {
        SigningKeyPair {
            signing: ed25519_dalek::SigningKey::from_bytes(seed),
        }
    }

    pub fn public_bytes(&self) -> [u8; PUBLIC_KEY_LEN] {
        self.signing.verifying_key().to_bytes()
    }

    pub fn sign(&self, msg: &[u8]) -> [u8; SIGNATURE_LEN] {
        self.signing.sign(msg).to_bytes()
    }
}

impl std::fmt::Debug for SigningKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SigningKeyPair(pub={})", hex::encode(self.public_bytes()))
    }
}

/// Verify `sig` over `msg` under the given public key. Malformed public
/// keys or signature encodings verify as `false`, never as an error.
pub fn verify(public: &[u8; PUBLIC_KEY_LEN], msg: &[u8], sig: &[u8]) -> bool {
    let Ok(key) = ed25519_dalek::VerifyingKey::from_bytes(public) else {
        return false;
    };
    let Ok(sig_arr) = <[u8; SIGNATURE_LEN]>::try_from(sig) else {
        return false;
    };
    let signature = ed25519_dalek::Signature::from_bytes(&sig_arr);
    key.verify(msg, &signature).is_ok()
}

/// X25519 key pair for ephemeral channel key agreement.
pub struct ExchangeKeyPair {
    secret: x25519_dalek::StaticSecret,
    public: x25519_dalek::PublicKey,
}

impl ExchangeKeyPair {
    pub fn generate(rng: &mut (impl RngCore + CryptoRng)) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let pair = Self::from_seed(&seed);
        seed.zeroize();
        pair
    }

    pub fn from_seed(seed: &[u8; 32]) -> Self {
        let secret = x25519_dalek::StaticSecret::from(*seed);
        let public = x25519_dalek::PublicKey::from(&secret);
        ExchangeKeyPair { secret, public }
    }

    pub fn public_bytes(&self) -> [u8; PUBLIC_KEY_LEN] {
        self.public.to_bytes()
    }
}

impl std::fmt::Debug for ExchangeKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ExchangeKeyPair(pub={})", hex::encode(self.public_bytes()))
    }
}

/// Output of X25519 key agreement. Zeroized on drop.
#[derive(Zeroize, ZeroizeOnDrop)]
pub struct SharedSecret(pub(crate) [u8; 32]);

impl std::fmt::Debug for SharedSecret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SharedSecret(..)")
    }
}

/// Diffie-Hellman agreement. Rejects public values that force a
/// non-contributory (all-zero) shared secret, including the all-zero key.
pub fn key_agree(
    my_private: &ExchangeKeyPair,
    their_public: &[u8; PUBLIC_KEY_LEN],
) -> Result<SharedSecret, CryptoError> {
    let public = x25519_dalek::PublicKey::from(*their_public);
    let shared = my_private.secret.diffie_hellman(&public);
    if !shared.was_contributory() {
        return Err(CryptoError::RejectedPublicKey);
    }
    Ok(SharedSecret(shared.to_bytes()))
}

/// 32-byte AEAD key. Zeroized on drop (best effort; this is a simulator).
#[derive(Clone, Zeroize, ZeroizeOnDrop)]
pub struct AeadKey(pub [u8; AEAD_KEY_LEN]);

impl AeadKey {
    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s.trim()).ok()?;
        Some(AeadKey(bytes.try_into().ok()?))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl std::fmt::Debug for AeadKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("AeadKey(..)")
    }
}

/// 12-byte AEAD nonce, unique per (key, message).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Nonce(pub [u8; NONCE_LEN]);

impl Nonce {
    /// Big-endian counter nonce: four zero bytes then the counter.
    /// Counters start at 0 and are never reused under one key.
    pub fn from_counter(counter: u64) -> Self {
        let mut n = [0u8; NONCE_LEN];
        n[4..].copy_from_slice(&counter.to_be_bytes());
        Nonce(n)
    }
}

/// Directional session keys derived from one handshake.
pub struct SessionKeys {
    pub client_to_server: AeadKey,
    pub server_to_client: AeadKey,
}

const KDF_LABEL_C2S: &[u8] = b"fmtee v1 client to server";
const KDF_LABEL_S2C: &[u8] = b"fmtee v1 server to client";

/// Derive the two directional keys from a shared secret and the digest of
/// the full handshake transcript. Deterministic; distinct transcripts give
/// distinct keys, and the two directions always differ.
pub fn derive_session_keys(shared: &SharedSecret, transcript_digest: &Digest256) -> SessionKeys {
    let hk = Hkdf::<Sha256>::new(Some(transcript_digest.as_bytes()), &shared.0);
    let mut c2s = [0u8; AEAD_KEY_LEN];
    let mut s2c = [0u8; AEAD_KEY_LEN];
    hk.expand(KDF_LABEL_C2S, &mut c2s).expect("valid length");
    hk.expand(KDF_LABEL_S2C, &mut s2c).expect("valid length");
    SessionKeys {
        client_to_server: AeadKey(c2s),
        server_to_client: AeadKey(s2c),
    }
}

/// Derive a single purpose-labelled key (sealing, page garbling).
pub fn derive_key(ikm: &[u8], salt: &[u8], info: &[u8]) -> AeadKey {
    let hk = Hkdf::<Sha256>::new(Some(salt), ikm);
    let mut out = [0u8; AEAD_KEY_LEN];
    hk.expand(info, &mut out).expect("valid length");
    AeadKey(out)
}

/// ChaCha20-Poly1305 seal. Output is `plaintext.len() + AEAD_TAG_LEN` bytes.
pub fn aead_seal(key: &AeadKey, nonce: &Nonce, plaintext: &[u8], associated_data: &[u8]) -> Vec<u8> {
    let cipher = ChaCha20Poly1305::new((&key.0).into());
    cipher
        .encrypt(
            (&nonce.0).into(),
            Payload {
                msg: plaintext,
                aad: associated_data,
            },
        )
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers")
}

/// ChaCha20-Poly1305 open. Any change to key, nonce, ciphertext or
/// associated data yields `DecryptFail`.
pub fn aead_open(
    key: &AeadKey,
    nonce: &Nonce,
    ciphertext: &[u8],
    associated_data: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let cipher = ChaCha20Poly1305::new((&key.0).into());
    cipher
        .decrypt(
            (&nonce.0).into(),
            Payload {
                msg: ciphertext,
                aad: associated_data,
            },
        )
        .map_err(|_| CryptoError::DecryptFail)
}
