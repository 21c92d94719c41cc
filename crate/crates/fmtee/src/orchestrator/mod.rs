//! The three deployment roles wired together over a tappable transport:
//! the CSP host service (instance allocation plus the privileged host
//! surface an adversary would hold), the model-provider deployment client
//! (steps 1-7: request, attest, verify, provision, publish), and the
//! end-user client (steps 8-9: attested channel, prompt). RAG chaining
//! deploys a second enclave holding a document index that the inference
//! enclave queries over its own attested channel.

mod csp;
mod demo;
mod provider;
mod user;

pub use csp::{CspBehavior, CspHost, InstanceInfo};
pub use demo::{run_demo_e2e, DemoOutcome};
pub use provider::{
    deploy_rag_chain, provider_deploy, ChainDescriptor, DeployError, ProviderConfig, RagConfig,
};
pub use user::{user_prompt, PromptOptions, PromptOutcome, ServiceClient, UserAuth, UserError};

use std::collections::BTreeSet;

use thiserror::Error;

use crate::crypto::Digest256;
use crate::enclave::{TeeType, PLATFORM_ID_LEN};
use crate::inference::TokenSequence;
use crate::verifier::VerdictReason;

// CSP service message types.
pub(crate) const MSG_DEPLOY_REQ: u8 = 0x10;
pub(crate) const MSG_DEPLOY_RESP: u8 = 0x11;
pub(crate) const MSG_PUT_PACKAGE: u8 = 0x12;
pub(crate) const MSG_OK: u8 = 0x13;
pub(crate) const MSG_HOST_TAMPER: u8 = 0x14;
pub(crate) const MSG_HOST_READ: u8 = 0x15;
pub(crate) const MSG_BYTES: u8 = 0x16;
pub(crate) const MSG_PLATFORM_INFO: u8 = 0x17;
pub(crate) const MSG_PLATFORM_INFO_RESP: u8 = 0x18;

// Instance service message types (outer layer).
pub(crate) const MSG_CLIENT_HELLO: u8 = 0x20;
pub(crate) const MSG_SERVER_HELLO: u8 = 0x21;
pub(crate) const MSG_FRAME: u8 = 0x22;
pub(crate) const MSG_ERROR: u8 = 0x7f;

// In-channel request/response types (after decryption).
pub(crate) const CH_PROVISION_KEY: u8 = 0x30;
pub(crate) const CH_OK: u8 = 0x31;
pub(crate) const CH_LOAD_MODEL: u8 = 0x32;
pub(crate) const CH_MODEL_HASH_REQ: u8 = 0x33;
pub(crate) const CH_QUOTE: u8 = 0x34;
pub(crate) const CH_PROMPT: u8 = 0x35;
pub(crate) const CH_COMPLETION: u8 = 0x36;
pub(crate) const CH_ACCURACY_REQ: u8 = 0x37;
pub(crate) const CH_ACCURACY_RESP: u8 = 0x38;
pub(crate) const CH_PROVENANCE_REQ: u8 = 0x39;
pub(crate) const CH_SET_RAG: u8 = 0x3a;
pub(crate) const CH_RAG_LOOKUP: u8 = 0x40;
pub(crate) const CH_RAG_DOC: u8 = 0x41;
pub(crate) const CH_PROVISION_DOCS: u8 = 0x42;
pub(crate) const CH_DOCS_HASH_REQ: u8 = 0x43;
pub(crate) const CH_ERR: u8 = 0x7e;

/// Error codes carried by `CH_ERR` responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServiceErrorCode {
    Crashed,
    DecryptFail,
    DigestMismatch,
    KeyNotProvisioned,
    Protocol,
    NoModelLoaded,
    RagAttestation,
}

impl ServiceErrorCode {
    pub(crate) fn code(&self) -> u8 {
        match self {
            ServiceErrorCode::Crashed => 1,
            ServiceErrorCode::DecryptFail => 2,
            ServiceErrorCode::DigestMismatch => 3,
            ServiceErrorCode::KeyNotProvisioned => 4,
            ServiceErrorCode::Protocol => 5,
            ServiceErrorCode::NoModelLoaded => 6,
            ServiceErrorCode::RagAttestation => 7,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(ServiceErrorCode::Crashed),
            2 => Some(ServiceErrorCode::DecryptFail),
            3 => Some(ServiceErrorCode::DigestMismatch),
            4 => Some(ServiceErrorCode::KeyNotProvisioned),
            5 => Some(ServiceErrorCode::Protocol),
            6 => Some(ServiceErrorCode::NoModelLoaded),
            7 => Some(ServiceErrorCode::RagAttestation),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ServiceErrorCode::Crashed => "SERVICE_CRASHED",
            ServiceErrorCode::DecryptFail => "DECRYPT_FAIL",
            ServiceErrorCode::DigestMismatch => "DIGEST_MISMATCH",
            ServiceErrorCode::KeyNotProvisioned => "KEY_NOT_PROVISIONED",
            ServiceErrorCode::Protocol => "PROTOCOL_ERROR",
            ServiceErrorCode::NoModelLoaded => "NO_MODEL_LOADED",
            ServiceErrorCode::RagAttestation => "RAG_ATTESTATION_FAILED",
        }
    }
}

impl std::fmt::Display for ServiceErrorCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Why a deployment aborted; carried with the failing step number.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AbortReason {
    #[error("VALIDATION_FAILED: {0}")]
    Validation(String),
    #[error("protocol failure: {0}")]
    Protocol(String),
    #[error("KEY_BINDING_MISMATCH")]
    KeyBindingMismatch,
    #[error("ATTESTATION_FAILED: {0:?}")]
    AttestationFailed(BTreeSet<VerdictReason>),
    #[error("MEASUREMENT_MISMATCH")]
    MeasurementMismatch,
    #[error("model load failed: {0}")]
    ModelLoad(ServiceErrorCode),
    #[error("MODEL_DIGEST_MISMATCH")]
    ModelDigestMismatch,
}

/// What the provider publishes at step 7: everything an end user needs to
/// reach the service and re-check the attestation at step 9. The pinned
/// measurement and model digest are the user's trust anchors; the
/// verifier coordinates let attestation happen via the verdict path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceDescriptor {
    pub address: String,
    pub tee_type: TeeType,
    pub measurement: Digest256,
    pub model_digest: Digest256,
    pub platform_id: [u8; PLATFORM_ID_LEN],
    pub platform_root_public: [u8; 32],
    pub verifier_address: String,
    pub verifier_public: [u8; 32],
}

impl ServiceDescriptor {
    pub fn render(&self) -> String {
        format!(
            "address = {}\ntee_type = {}\nmeasurement = {}\nmodel_digest = {}\n\
             platform_id = {}\nplatform_root_public = {}\nverifier_address = {}\n\
             verifier_public = {}\n",
            self.address,
            self.tee_type.as_str(),
            self.measurement.to_hex(),
            self.model_digest.to_hex(),
            hex::encode(self.platform_id),
            hex::encode(self.platform_root_public),
            self.verifier_address,
            hex::encode(self.verifier_public),
        )
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut address = None;
        let mut tee_type = None;
        let mut measurement = None;
        let mut model_digest = None;
        let mut platform_id = None;
        let mut platform_root_public = None;
        let mut verifier_address = None;
        let mut verifier_public = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", idx + 1))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| format!("line {}: invalid {what}", idx + 1);
            match key {
                "address" => address = Some(value.to_string()),
                "tee_type" => {
                    tee_type = Some(TeeType::parse(value).ok_or_else(|| bad("tee_type"))?)
                }
                "measurement" => {
                    measurement = Some(Digest256::from_hex(value).ok_or_else(|| bad("measurement"))?)
                }
                "model_digest" => {
                    model_digest =
                        Some(Digest256::from_hex(value).ok_or_else(|| bad("model_digest"))?)
                }
                "platform_id" => {
                    platform_id = Some(
                        hex::decode(value)
                            .ok()
                            .and_then(|v| <[u8; PLATFORM_ID_LEN]>::try_from(v).ok())
                            .ok_or_else(|| bad("platform_id"))?,
                    )
                }
                "platform_root_public" => {
                    platform_root_public = Some(
                        hex::decode(value)
                            .ok()
                            .and_then(|v| <[u8; 32]>::try_from(v).ok())
                            .ok_or_else(|| bad("platform_root_public"))?,
                    )
                }
                "verifier_address" => verifier_address = Some(value.to_string()),
                "verifier_public" => {
                    verifier_public = Some(
                        hex::decode(value)
                            .ok()
                            .and_then(|v| <[u8; 32]>::try_from(v).ok())
                            .ok_or_else(|| bad("verifier_public"))?,
                    )
                }
                other => return Err(format!("line {}: unknown key '{other}'", idx + 1)),
            }
        }
        let need = |what: &str| format!("missing field '{what}'");
        Ok(ServiceDescriptor {
            address: address.ok_or_else(|| need("address"))?,
            tee_type: tee_type.ok_or_else(|| need("tee_type"))?,
            measurement: measurement.ok_or_else(|| need("measurement"))?,
            model_digest: model_digest.ok_or_else(|| need("model_digest"))?,
            platform_id: platform_id.ok_or_else(|| need("platform_id"))?,
            platform_root_public: platform_root_public.ok_or_else(|| need("platform_root_public"))?,
            verifier_address: verifier_address.ok_or_else(|| need("verifier_address"))?,
            verifier_public: verifier_public.ok_or_else(|| need("verifier_public"))?,
        })
    }
}

/// The individual defenses the deployment flow relies on, one per attack
/// scenario in the adversary harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Defense {
    /// Channel AEAD over prompts and completions.
    ChannelEncryption,
    /// Garbled host reads of protected memory.
    MemoryGarbling,
    /// Shadow-digest verification on in-enclave access.
    IntegrityChecks,
    /// Package authentication and digest validation at load.
    PackageAuth,
    /// The provider's step-7 model hash comparison.
    ModelHashCheck,
    /// The step-4/5 measurement comparison.
    MeasurementCheck,
}

/// Switches that turn individual defenses off so the adversary harness can
/// prove its detectors work (negative controls). Constructible as
/// non-default only with the `insecure-test-hooks` feature; release
/// binaries carry only the inert default, so no CLI path can reach a
/// disabled defense.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DefenseHooks {
    pub(crate) disable_channel_encryption: bool,
    pub(crate) disable_memory_garbling: bool,
    pub(crate) disable_integrity_checks: bool,
    pub(crate) disable_package_auth: bool,
    pub(crate) disable_model_hash_check: bool,
    pub(crate) disable_measurement_check: bool,
}

impl DefenseHooks {
    // cfg!-folded accessors: with the feature off these are constant
    // false, so every dependent branch is dead code in release builds.
    pub(crate) fn package_auth_disabled(&self) -> bool {
        cfg!(feature = "insecure-test-hooks") && self.disable_package_auth
    }

    pub(crate) fn model_hash_check_disabled(&self) -> bool {
        cfg!(feature = "insecure-test-hooks") && self.disable_model_hash_check
    }

    pub(crate) fn measurement_check_disabled(&self) -> bool {
        cfg!(feature = "insecure-test-hooks") && self.disable_measurement_check
    }
}

#[cfg(feature = "insecure-test-hooks")]
impl DefenseHooks {
    /// Hooks with exactly one defense turned off.
    pub fn disabling(defense: Defense) -> Self {
        let mut hooks = DefenseHooks::default();
        match defense {
            Defense::ChannelEncryption => hooks.disable_channel_encryption = true,
            Defense::MemoryGarbling => hooks.disable_memory_garbling = true,
            Defense::IntegrityChecks => hooks.disable_integrity_checks = true,
            Defense::PackageAuth => hooks.disable_package_auth = true,
            Defense::ModelHashCheck => hooks.disable_model_hash_check = true,
            Defense::MeasurementCheck => hooks.disable_measurement_check = true,
        }
        hooks
    }
}

/// Exact-match document index served by a RAG enclave: lookup key is a
/// full prompt token sequence, the value is prepended as context.
pub type DocumentIndex = Vec<(TokenSequence, TokenSequence)>;

/// Canonical rendering of a document index; its digest is what the RAG
/// deployment step 7 compares.
pub fn render_docs(docs: &DocumentIndex) -> String {
    let mut out = String::new();
    for (key, doc) in docs {
        out.push_str(&key.to_csv());
        out.push('\t');
        out.push_str(&doc.to_csv());
        out.push('\n');
    }
    out
}

pub fn parse_docs(text: &str) -> Result<DocumentIndex, String> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (k, d) = line
            .split_once('\t')
            .ok_or_else(|| format!("line {}: expected 'key-csv TAB doc-csv'", idx + 1))?;
        let key = TokenSequence::parse_csv(k).ok_or_else(|| format!("line {}: bad key", idx + 1))?;
        let doc = TokenSequence::parse_csv(d).ok_or_else(|| format!("line {}: bad doc", idx + 1))?;
        out.push((key, doc));
    }
    Ok(out)
}

pub fn docs_digest(docs: &DocumentIndex) -> Digest256 {
    crate::crypto::digest(render_docs(docs).as_bytes())
}
