//! Model weights, encrypted packaging, and in-enclave provisioning.
//!
//! Weights are pseudo-randomly generated 32-bit fixed-point values so that
//! a model is fully described by `(seed, dims)`, digests are reproducible
//! on any platform, and swapped-model scenarios are cheap to construct.
//! The serialized form stores the tensor values themselves: a tampered or
//! re-quantized model keeps the header but changes the bytes, which is
//! exactly what the model-hash check has to catch.
//!
//! Package layout (`.fmte`, byte-exact in FORMATS.md):
//!
//! ```text
//! magic "FMTE" | version 0x01 | key_id(16) | nonce(12) | model_digest(32)
//! | ciphertext len (u64 BE) | ciphertext
//! ```
//!
//! The 65-byte header is the AEAD associated data, so any header edit
//! fails decryption.

use rand::{CryptoRng, Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::crypto::{aead_open, aead_seal, digest, AeadKey, CryptoError, Digest256, Nonce};
use crate::enclave::{AttestationQuote, Enclave, EnclaveError, OwnerToken};

pub const PACKAGE_MAGIC: &[u8; 4] = b"FMTE";
pub const PACKAGE_VERSION: u8 = 1;
pub const KEY_ID_LEN: usize = 16;
const WEIGHTS_MAGIC: &[u8; 4] = b"FMW1";
const PACKAGE_HEADER_LEN: usize = 4 + 1 + KEY_ID_LEN + 12 + 32;

/// Weight values are signed 16-bit quantities stored as i32, interpreted
/// as fixed point with scale 2^-16. Integer generation keeps every
/// platform bit-identical.
pub const WEIGHT_MIN: i32 = -(1 << 15);
pub const WEIGHT_MAX: i32 = (1 << 15) - 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("package failed authenticated decryption")]
    DecryptFail,
    #[error("decrypted payload does not match the header model digest")]
    DigestMismatch,
    #[error("no decryption key provisioned under this key id")]
    KeyNotProvisioned,
    #[error("no model loaded in the enclave")]
    NoModelLoaded,
    #[error("malformed package: {0}")]
    MalformedPackage(String),
    #[error("malformed weights: {0}")]
    MalformedWeights(String),
    #[error("unsupported package version {0}")]
    UnsupportedVersion(u8),
    #[error(transparent)]
    Enclave(#[from] EnclaveError),
}

/// Deterministic toy model weights: one flat table of
/// `vocab_size * embed_dim` fixed-point values indexed by hashed features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelWeights {
    pub seed: u64,
    pub vocab_size: u32,
    pub embed_dim: u32,
    pub context_window: u32,
    pub tensors: Vec<i32>,
}

impl ModelWeights {
    /// Generate the tensors from the seed. Same inputs give bit-identical
    /// tensors on every architecture.
    pub fn generate(seed: u64, vocab_size: u32, embed_dim: u32, context_window: u32) -> Self {
        assert!(vocab_size > 0 && embed_dim > 0 && context_window > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = vocab_size as usize * embed_dim as usize;
        let tensors = (0..len)
            .map(|_| (rng.next_u32() & 0xffff) as i32 + WEIGHT_MIN)
            .collect();
        ModelWeights {
            seed,
            vocab_size,
            embed_dim,
            context_window,
            tensors,
        }
    }

    /// Canonical serialization: magic, dims, then big-endian tensors.
    pub fn serialize(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(4 + 8 + 12 + 8 + self.tensors.len() * 4);
        buf.extend_from_slice(WEIGHTS_MAGIC);
        buf.extend_from_slice(&self.seed.to_be_bytes());
        buf.extend_from_slice(&self.vocab_size.to_be_bytes());
        buf.extend_from_slice(&self.embed_dim.to_be_bytes());
        buf.extend_from_slice(&self.context_window.to_be_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u64).to_be_bytes());
        for t in &self.tensors {
            buf.extend_from_slice(&t.to_be_bytes());
        }
        buf
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |msg: &str| ModelError::MalformedWeights(msg.into());
        if bytes.len() < 32 || &bytes[..4] != WEIGHTS_MAGIC {
            return Err(bad("missing FMW1 magic"));
        }
        let seed = u64::from_be_bytes(bytes[4..12].try_into().unwrap());
        let vocab_size = u32::from_be_bytes(bytes[12..16].try_into().unwrap());
        let embed_dim = u32::from_be_bytes(bytes[16..20].try_into().unwrap());
        let context_window = u32::from_be_bytes(bytes[20..24].try_into().unwrap());
        let count = u64::from_be_bytes(bytes[24..32].try_into().unwrap()) as usize;
        if vocab_size == 0 || embed_dim == 0 || context_window == 0 {
            return Err(bad("zero dimension"));
        }
        if count != vocab_size as usize * embed_dim as usize {
            return Err(bad("tensor count does not match dims"));
        }
        if bytes.len() != 32 + count * 4 {
            return Err(bad("length does not match tensor count"));
        }
        let tensors = bytes[32..]
            .chunks_exact(4)
            .map(|c| i32::from_be_bytes(c.try_into().unwrap()))
            .collect();
        Ok(ModelWeights {
            seed,
            vocab_size,
            embed_dim,
            context_window,
            tensors,
        })
    }

    /// Digest of the canonical serialization: the model identity used in
    /// provisioning checks and hash attestation.
    pub fn digest(&self) -> Digest256 {
        digest(&self.serialize())
    }
}

/// AEAD-sealed serialized weights plus the plaintext model digest the
/// provider compares against after loading.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedModelPackage {
    pub key_id: [u8; KEY_ID_LEN],
    pub nonce: [u8; 12],
    pub model_digest: Digest256,
    pub ciphertext: Vec<u8>,
}

impl EncryptedModelPackage {
    fn header(&self) -> [u8; PACKAGE_HEADER_LEN] {
        let mut h = [0u8; PACKAGE_HEADER_LEN];
        h[..4].copy_from_slice(PACKAGE_MAGIC);
        h[4] = PACKAGE_VERSION;
        h[5..5 + KEY_ID_LEN].copy_from_slice(&self.key_id);
        h[5 + KEY_ID_LEN..5 + KEY_ID_LEN + 12].copy_from_slice(&self.nonce);
        h[5 + KEY_ID_LEN + 12..].copy_from_slice(self.model_digest.as_bytes());
        h
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(PACKAGE_HEADER_LEN + 8 + self.ciphertext.len());
        buf.extend_from_slice(&self.header());
        buf.extend_from_slice(&(self.ciphertext.len() as u64).to_be_bytes());
        buf.extend_from_slice(&self.ciphertext);
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |msg: &str| ModelError::MalformedPackage(msg.into());
        if bytes.len() < PACKAGE_HEADER_LEN + 8 {
            return Err(bad("package too short"));
        }
        if &bytes[..4] != PACKAGE_MAGIC {
            return Err(bad("missing FMTE magic"));
        }
        if bytes[4] != PACKAGE_VERSION {
            return Err(ModelError::UnsupportedVersion(bytes[4]));
        }
        let key_id: [u8; KEY_ID_LEN] = bytes[5..5 + KEY_ID_LEN].try_into().unwrap();
        let nonce: [u8; 12] = bytes[5 + KEY_ID_LEN..5 + KEY_ID_LEN + 12].try_into().unwrap();
        let model_digest =
            Digest256::from_slice(&bytes[5 + KEY_ID_LEN + 12..PACKAGE_HEADER_LEN]).unwrap();
        let ct_len = u64::from_be_bytes(
            bytes[PACKAGE_HEADER_LEN..PACKAGE_HEADER_LEN + 8]
                .try_into()
                .unwrap(),
        ) as usize;
        let ct = &bytes[PACKAGE_HEADER_LEN + 8..];
        if ct.len() != ct_len {
            return Err(bad("ciphertext length mismatch"));
        }
        Ok(EncryptedModelPackage {
            key_id,
            nonce,
            model_digest,
            ciphertext: ct.to_vec(),
        })
    }
}

/// Seal `weights` under `key`. A fresh nonce is drawn per pack, so
/// repacking the same weights yields different ciphertext but the same
/// model digest.
pub fn pack_model(
    weights: &ModelWeights,
    key: &AeadKey,
    key_id: [u8; KEY_ID_LEN],
    rng: &mut (impl RngCore + CryptoRng),
) -> EncryptedModelPackage {
    let serialized = weights.serialize();
    let model_digest = digest(&serialized);
    let nonce: [u8; 12] = rng.gen();

    let mut pkg = EncryptedModelPackage {
        key_id,
        nonce,
        model_digest,
        ciphertext: Vec::new(),
    };
    pkg.ciphertext = aead_seal(key, &Nonce(nonce), &serialized, &pkg.header());
    pkg
}

/// Decrypt and validate a package outside any enclave (provider-side
/// tooling and tests).
pub fn open_package(
    pkg: &EncryptedModelPackage,
    key: &AeadKey,
) -> Result<ModelWeights, ModelError> {
    let serialized = aead_open(key, &Nonce(pkg.nonce), &pkg.ciphertext, &pkg.header())
        .map_err(|e| match e {
            CryptoError::DecryptFail => ModelError::DecryptFail,
            CryptoError::RejectedPublicKey => ModelError::MalformedPackage(e.to_string()),
        })?;
    if digest(&serialized) != pkg.model_digest {
        return Err(ModelError::DigestMismatch);
    }
    ModelWeights::deserialize(&serialized)
}

/// Handle to a model whose serialized form lives in protected pages.
#[derive(Debug, Clone)]
pub struct EnclaveModel {
    region_offset: u64,
    region_len: u64,
    pub model_digest: Digest256,
    pub vocab_size: u32,
    pub embed_dim: u32,
    pub context_window: u32,
}

impl EnclaveModel {
    /// Read the serialized model back out of protected memory (in-enclave
    /// access: integrity checked, crash on tamper) and deserialize it.
    pub fn load_weights(
        &self,
        enclave: &Enclave,
        token: &OwnerToken,
    ) -> Result<ModelWeights, ModelError> {
        let bytes = enclave.read(token, self.region_offset, self.region_len as usize)?;
        ModelWeights::deserialize(&bytes)
    }

    /// Digest of the serialization currently in protected memory.
    pub fn digest_in_enclave(
        &self,
        enclave: &Enclave,
        token: &OwnerToken,
    ) -> Result<Digest256, ModelError> {
        let bytes = enclave.read(token, self.region_offset, self.region_len as usize)?;
        Ok(digest(&bytes))
    }

    pub fn region(&self) -> (u64, u64) {
        (self.region_offset, self.region_len)
    }
}

/// Step-6 load: unseal the provisioned key, open the package, and
/// materialize the weights into protected pages. The plaintext
/// serialization exists only inside the enclave.
pub fn unpack_model_in_enclave(
    enclave: &Enclave,
    token: &OwnerToken,
    pkg: &EncryptedModelPackage,
    key_id: [u8; KEY_ID_LEN],
) -> Result<EnclaveModel, ModelError> {
    unpack_model_inner(enclave, token, pkg, key_id, false)
}

/// Test-only defense hook: bypass package authentication and the digest
/// comparison, decrypting the raw stream instead. Lets the adversary
/// harness show that a tampered package would otherwise load.
#[cfg(feature = "insecure-test-hooks")]
pub fn unpack_model_in_enclave_unauthenticated(
    enclave: &Enclave,
    token: &OwnerToken,
    pkg: &EncryptedModelPackage,
    key_id: [u8; KEY_ID_LEN],
) -> Result<EnclaveModel, ModelError> {
    unpack_model_inner(enclave, token, pkg, key_id, true)
}

pub(crate) fn unpack_model_inner(
    enclave: &Enclave,
    token: &OwnerToken,
    pkg: &EncryptedModelPackage,
    key_id: [u8; KEY_ID_LEN],
    skip_auth: bool,
) -> Result<EnclaveModel, ModelError> {
    let sealed = enclave
        .sealed_blob(token, key_id)?
        .ok_or(ModelError::KeyNotProvisioned)?;
    let key_bytes = enclave.unseal(token, key_id, &sealed)?;
    let key_arr: [u8; 32] = key_bytes
        .try_into()
        .map_err(|_| ModelError::MalformedPackage("provisioned key has wrong length".into()))?;
    let key = AeadKey(key_arr);

    let serialized = if skip_auth {
        decrypt_unauthenticated(&key, pkg)?
    } else {
        let pt = aead_open(&key, &Nonce(pkg.nonce), &pkg.ciphertext, &pkg.header())
            .map_err(|_| ModelError::DecryptFail)?;
        if digest(&pt) != pkg.model_digest {
            return Err(ModelError::DigestMismatch);
        }
        pt
    };
    let weights = ModelWeights::deserialize(&serialized)?;

    let offset = enclave.alloc(token, serialized.len())?;
    enclave.write(token, offset, &serialized)?;
    enclave.register_region(
        token,
        "model",
        crate::enclave::Region {
            offset,
            len: serialized.len() as u64,
        },
    )?;
    Ok(EnclaveModel {
        region_offset: offset,
        region_len: serialized.len() as u64,
        model_digest: pkg.model_digest,
        vocab_size: weights.vocab_size,
        embed_dim: weights.embed_dim,
        context_window: weights.context_window,
    })
}

/// Raw ChaCha20 stream decryption with no tag or digest verification:
/// only reachable through the test-hook path above. The payload keystream
/// starts at block 1 (block 0 keys the authenticator in the AEAD).
#[cfg(feature = "insecure-test-hooks")]
fn decrypt_unauthenticated(
    key: &AeadKey,
    pkg: &EncryptedModelPackage,
) -> Result<Vec<u8>, ModelError> {
    use chacha20::cipher::{KeyIvInit, StreamCipher, StreamCipherSeek};
    if pkg.ciphertext.len() < crate::crypto::AEAD_TAG_LEN {
        return Err(ModelError::DecryptFail);
    }
    let body_len = pkg.ciphertext.len() - crate::crypto::AEAD_TAG_LEN;
    let mut buf = pkg.ciphertext[..body_len].to_vec();
    let mut cipher = chacha20::ChaCha20::new((&key.0).into(), (&pkg.nonce).into());
    cipher.seek(64usize);
    cipher.apply_keystream(&mut buf);
    Ok(buf)
}

#[cfg(not(feature = "insecure-test-hooks"))]
fn decrypt_unauthenticated(
    _key: &AeadKey,
    _pkg: &EncryptedModelPackage,
) -> Result<Vec<u8>, ModelError> {
    unreachable!("unauthenticated decryption exists only under insecure-test-hooks")
}

/// Step-7 check: a quote whose report data is the digest of the model
/// serialization currently loaded in protected memory. The provider
/// compares it against the digest of the model they shipped.
pub fn attest_model_hash(
    enclave: &Enclave,
    token: &OwnerToken,
    model: &EnclaveModel,
) -> Result<AttestationQuote, ModelError> {
    let loaded_digest = model.digest_in_enclave(enclave, token)?;
    Ok(enclave.get_quote(token, *loaded_digest.as_bytes())?)
}
