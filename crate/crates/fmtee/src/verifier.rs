//! Attestation verification service.
//!
//! Checks quote signatures against known platform roots and measurements
//! against a reference policy, returning verdicts signed with the
//! verifier's own identity key so clients can hand them to third parties.
//! Runs either in-process (`Verifier::verify_quote`) or as a standalone
//! framed service (`serve`); both paths produce bit-identical verdicts.
//!
//! Wire protocol: 4-byte big-endian length prefix, then 1 message-type
//! byte, then the payload. `VERIFY_REQ (0x01)` carries an encoded quote;
//! `VERIFY_RESP (0x02)` carries an encoded verdict; `ERROR (0x7F)` carries
//! a UTF-8 message.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use thiserror::Error;

use crate::crypto::{self, digest, Digest256, SigningKeyPair, SIGNATURE_LEN};
use crate::enclave::{AttestationQuote, TeeType, PLATFORM_ID_LEN};
use crate::net::{Conn, Listener, NetError};

pub const MSG_VERIFY_REQ: u8 = 0x01;
pub const MSG_VERIFY_RESP: u8 = 0x02;
pub const MSG_ERROR: u8 = 0x7f;

const VERDICT_DOMAIN: &[u8] = b"fmtee.verdict.v1";

#[derive(Debug, Error)]
pub enum VerifierError {
    #[error("policy error: {0}")]
    Policy(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("verifier protocol error: {0}")]
    Protocol(String),
}

/// Reasons a quote can fail policy evaluation. Reported as a sorted set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum VerdictReason {
    SignatureInvalid,
    UnknownPlatform,
    MeasurementMismatch,
    TeeTypeRejected,
}

impl VerdictReason {
    pub fn code(&self) -> u8 {
        match self {
            VerdictReason::SignatureInvalid => 1,
            VerdictReason::UnknownPlatform => 2,
            VerdictReason::MeasurementMismatch => 3,
            VerdictReason::TeeTypeRejected => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(VerdictReason::SignatureInvalid),
            2 => Some(VerdictReason::UnknownPlatform),
            3 => Some(VerdictReason::MeasurementMismatch),
            4 => Some(VerdictReason::TeeTypeRejected),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            VerdictReason::SignatureInvalid => "SIGNATURE_INVALID",
            VerdictReason::UnknownPlatform => "UNKNOWN_PLATFORM",
            VerdictReason::MeasurementMismatch => "MEASUREMENT_MISMATCH",
            VerdictReason::TeeTypeRejected => "TEE_TYPE_REJECTED",
        }
    }
}

impl std::fmt::Display for VerdictReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Expected values generated before the enclave was started: accepted
/// measurements, accepted TEE types, and the platform roots to trust,
/// keyed by platform id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferencePolicy {
    pub accepted_measurements: BTreeSet<Digest256>,
    pub accepted_tee_types: BTreeSet<TeeType>,
    pub trusted_roots: BTreeMap<[u8; PLATFORM_ID_LEN], [u8; 32]>,
}

impl ReferencePolicy {
    pub fn new(
        accepted_measurements: impl IntoIterator<Item = Digest256>,
        accepted_tee_types: impl IntoIterator<Item = TeeType>,
        trusted_roots: impl IntoIterator<Item = ([u8; PLATFORM_ID_LEN], [u8; 32])>,
    ) -> Result<Self, VerifierError> {
        let policy = ReferencePolicy {
            accepted_measurements: accepted_measurements.into_iter().collect(),
            accepted_tee_types: accepted_tee_types.into_iter().collect(),
            trusted_roots: trusted_roots.into_iter().collect(),
        };
        if policy.trusted_roots.is_empty() {
            return Err(VerifierError::Policy(
                "policy must list at least one trusted platform root".into(),
            ));
        }
        Ok(policy)
    }

    /// Parse the `key = value` policy format:
    ///
    /// ```text
    /// accepted_measurement = <64 hex>          # repeated
    /// accepted_tee_type = application          # repeated; application | vm
    /// trusted_root = <32 hex platform id>:<64 hex public key>   # repeated
    /// ```
    pub fn parse(text: &str) -> Result<Self, VerifierError> {
        let mut measurements = BTreeSet::new();
        let mut tee_types = BTreeSet::new();
        let mut roots = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                VerifierError::Policy(format!("line {line_no}: expected 'key = value'"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad =
                |msg: String| VerifierError::Policy(format!("line {line_no}: {msg}"));
            match key {
                "accepted_measurement" => {
                    let d = Digest256::from_hex(value)
                        .ok_or_else(|| bad(format!("invalid measurement '{value}'")))?;
                    measurements.insert(d);
                }
                "accepted_tee_type" => {
                    let t = TeeType::parse(value)
                        .ok_or_else(|| bad(format!("invalid tee type '{value}'")))?;
                    tee_types.insert(t);
                }
                "trusted_root" => {
                    let (id_hex, key_hex) = value
                        .split_once(':')
                        .ok_or_else(|| bad("expected '<platform id>:<public key>'".into()))?;
                    let id: [u8; PLATFORM_ID_LEN] = hex::decode(id_hex.trim())
                        .ok()
                        .and_then(|v| v.try_into().ok())
                        .ok_or_else(|| bad(format!("invalid platform id '{id_hex}'")))?;
                    let root: [u8; 32] = hex::decode(key_hex.trim())
                        .ok()
                        .and_then(|v| v.try_into().ok())
                        .ok_or_else(|| bad(format!("invalid root key '{key_hex}'")))?;
                    roots.insert(id, root);
                }
                other => return Err(bad(format!("unknown key '{other}'"))),
            }
        }
        Self::new(measurements, tee_types, roots)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for m in &self.accepted_measurements {
            out.push_str(&format!("accepted_measurement = {}\n", m.to_hex()));
        }
        for t in &self.accepted_tee_types {
            out.push_str(&format!("accepted_tee_type = {}\n", t.as_str()));
        }
        for (id, key) in &self.trusted_roots {
            out.push_str(&format!(
                "trusted_root = {}:{}\n",
                hex::encode(id),
                hex::encode(key)
            ));
        }
        out
    }
}

/// Signed assessment of one quote. `passed` iff `reasons` is empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub passed: bool,
    pub reasons: BTreeSet<VerdictReason>,
    pub quote_digest: Digest256,
    pub verifier_signature: [u8; SIGNATURE_LEN],
}

impl Verdict {
    fn signed_payload(
        passed: bool,
        reasons: &BTreeSet<VerdictReason>,
        quote_digest: &Digest256,
    ) -> Vec<u8> {
        let mut buf = Vec::with_capacity(VERDICT_DOMAIN.len() + 2 + reasons.len() + 32);
        buf.extend_from_slice(VERDICT_DOMAIN);
        buf.push(passed as u8);
        buf.push(reasons.len() as u8);
        for r in reasons {
            buf.push(r.code());
        }
        buf.extend_from_slice(quote_digest.as_bytes());
        buf
    }

    /// Wire encoding: result byte, reason count, sorted reason codes,
    /// quote digest, verifier signature.
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Self::signed_payload(self.passed, &self.reasons, &self.quote_digest)
            [VERDICT_DOMAIN.len()..]
            .to_vec();
        buf.extend_from_slice(&self.verifier_signature);
        buf
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        if bytes.len() < 2 {
            return None;
        }
        let passed = match bytes[0] {
            0 => false,
            1 => true,
            _ => return None,
        };
        let n = bytes[1] as usize;
        let expected_len = 2 + n + 32 + SIGNATURE_LEN;
        if bytes.len() != expected_len {
            return None;
        }
        let mut reasons = BTreeSet::new();
        for i in 0..n {
            reasons.insert(VerdictReason::from_code(bytes[2 + i])?);
        }
        if reasons.len() != n {
            return None; // duplicates are not canonical
        }
        let quote_digest = Digest256::from_slice(&bytes[2 + n..2 + n + 32])?;
        let verifier_signature: [u8; SIGNATURE_LEN] = bytes[2 + n + 32..].try_into().ok()?;
        let verdict = Verdict {
            passed,
            reasons,
            quote_digest,
            verifier_signature,
        };
        if verdict.passed != verdict.reasons.is_empty() {
            return None;
        }
        Some(verdict)
    }

    /// Check the verdict signature under the verifier's published key.
    pub fn verify(&self, verifier_public: &[u8; 32]) -> bool {
        let payload = Self::signed_payload(self.passed, &self.reasons, &self.quote_digest);
        crypto::verify(verifier_public, &payload, &self.verifier_signature)
    }

    /// True when this verdict is a pass over exactly `quote`.
    pub fn covers(&self, quote: &AttestationQuote) -> bool {
        self.quote_digest == digest(&quote.encode())
    }
}

/// The verifier: a policy plus an identity key for signing verdicts.
pub struct Verifier {
    policy: ReferencePolicy,
    identity: SigningKeyPair,
}

impl Verifier {
    pub fn new(policy: ReferencePolicy, identity: SigningKeyPair) -> Self {
        Verifier { policy, identity }
    }

    pub fn public_key(&self) -> [u8; 32] {
        self.identity.public_bytes()
    }

    pub fn policy(&self) -> &ReferencePolicy {
        &self.policy
    }

    /// Evaluate one quote against the policy. Never errors: every failure
    /// mode becomes a verdict reason. Ed25519 is deterministic, so equal
    /// quotes always produce bit-identical verdicts.
    pub fn verify_quote(&self, quote: &AttestationQuote) -> Verdict {
        let mut reasons = BTreeSet::new();

        match self.policy.trusted_roots.get(&quote.platform_id) {
            Some(root) => {
                if !quote.verify(root) {
                    reasons.insert(VerdictReason::SignatureInvalid);
                }
            }
            None => {
                reasons.insert(VerdictReason::UnknownPlatform);
                // The quote may still be from a key we trust under another
                // platform id; only then is the signature itself valid.
                if !self
                    .policy
                    .trusted_roots
                    .values()
                    .any(|root| quote.verify(root))
                {
                    reasons.insert(VerdictReason::SignatureInvalid);
                }
            }
        }

        if !self.policy.accepted_measurements.contains(&quote.measurement) {
            reasons.insert(VerdictReason::MeasurementMismatch);
        }
        if !self.policy.accepted_tee_types.contains(&quote.tee_type) {
            reasons.insert(VerdictReason::TeeTypeRejected);
        }

        let passed = reasons.is_empty();
        let quote_digest = digest(&quote.encode());
        let signature = self
            .identity
            .sign(&Verdict::signed_payload(passed, &reasons, &quote_digest));
        Verdict {
            passed,
            reasons,
            quote_digest,
            verifier_signature: signature,
        }
    }
}

/// Serve verify requests until the listener closes. Each connection is
/// handled on its own thread; the policy is immutable for the lifetime of
/// the service.
pub fn serve(mut listener: Box<dyn Listener>, verifier: Arc<Verifier>) {
    loop {
        let mut conn = match listener.accept() {
            Ok(c) => c,
            Err(_) => return,
        };
        let verifier = Arc::clone(&verifier);
        std::thread::spawn(move || {
            while let Ok(msg) = conn.recv_msg() {
                let reply = handle_message(&verifier, &msg);
                if conn.send_msg(&reply).is_err() {
                    break;
                }
            }
        });
    }
}

fn handle_message(verifier: &Verifier, msg: &[u8]) -> Vec<u8> {
    let error = |text: &str| {
        let mut out = vec![MSG_ERROR];
        out.extend_from_slice(text.as_bytes());
        out
    };
    if msg.is_empty() {
        return error("empty message");
    }
    match msg[0] {
        MSG_VERIFY_REQ => match AttestationQuote::decode(&msg[1..]) {
            Some(quote) => {
                let verdict = verifier.verify_quote(&quote);
                let mut out = vec![MSG_VERIFY_RESP];
                out.extend_from_slice(&verdict.encode());
                out
            }
            None => error("malformed quote"),
        },
        other => error(&format!("unknown message type {other:#04x}")),
    }
}

/// Client side of the wire protocol: send one quote, get its verdict.
pub fn request_verdict(conn: &mut dyn Conn, quote: &AttestationQuote) -> Result<Verdict, VerifierError> {
    let mut msg = vec![MSG_VERIFY_REQ];
    msg.extend_from_slice(&quote.encode());
    conn.send_msg(&msg)?;
    let reply = conn.recv_msg()?;
    match reply.first() {
        Some(&MSG_VERIFY_RESP) => Verdict::decode(&reply[1..])
            .ok_or_else(|| VerifierError::Protocol("malformed verdict".into())),
        Some(&MSG_ERROR) => Err(VerifierError::Protocol(
            String::from_utf8_lossy(&reply[1..]).into_owned(),
        )),
        _ => Err(VerifierError::Protocol("unexpected reply".into())),
    }
}
