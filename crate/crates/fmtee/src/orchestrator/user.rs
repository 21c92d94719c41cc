//! End-user client: open an attested channel to a deployed service (step
//! 8) while establishing that it runs in a TEE with the published
//! measurement (step 9), then submit a prompt.

use std::collections::BTreeSet;

use rand::rngs::OsRng;
use thiserror::Error;

use crate::channel::{client_start, ChannelError, ClientAuth};
use crate::crypto::SigningKeyPair;
use crate::inference::TokenSequence;
use crate::net::{wire, Network};
use crate::verifier::{request_verdict, ReferencePolicy, Verdict, VerdictReason, Verifier};

use super::csp::{read_tokens, write_tokens};
use super::*;

#[derive(Debug, Error)]
pub enum UserError {
    #[error("attestation failed: {0:?}")]
    AttestationFailed(BTreeSet<VerdictReason>),
    #[error("service crashed (integrity fault); connection closed")]
    ServiceCrashed,
    #[error("channel error: {0}")]
    Channel(#[from] ChannelError),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("service error: {0}")]
    Service(ServiceErrorCode),
}

/// How the user attests the service: via the verifier service named in
/// the descriptor (the RA-TLS topology where users get verifier access),
/// or locally from the descriptor's pinned platform root.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UserAuth {
    ViaVerifier,
    LocalPolicy,
}

#[derive(Debug, Clone)]
pub struct PromptOptions {
    pub beam_width: u32,
    pub max_new_tokens: u32,
    pub auth: UserAuth,
    /// Inert by default; see [`DefenseHooks`].
    pub hooks: DefenseHooks,
}

impl Default for PromptOptions {
    fn default() -> Self {
        PromptOptions {
            beam_width: 1,
            max_new_tokens: 16,
            auth: UserAuth::ViaVerifier,
            hooks: DefenseHooks::default(),
        }
    }
}

/// The completion plus the attestation evidence the user saw at step 9.
#[derive(Debug, Clone)]
pub struct PromptOutcome {
    pub completion: TokenSequence,
    pub verdict: Verdict,
    pub peer_measurement: crate::crypto::Digest256,
}

/// An attested session with a deployed service: the channel plus the
/// attestation evidence gathered while opening it. Useful both to end
/// users (prompts) and to third parties consuming accuracy or provenance
/// attestations.
pub struct ServiceClient {
    conn: Box<dyn crate::net::Conn>,
    channel: crate::channel::SecureChannel,
    pub verdict: Verdict,
    pub peer_measurement: crate::crypto::Digest256,
}

impl ServiceClient {
    /// Open the attested channel (step 8) while verifying the attestation
    /// (step 9): the quote must carry the descriptor's exact measurement
    /// and pass either the verifier service or a local policy built from
    /// the descriptor's pinned platform root.
    pub fn connect(
        descriptor: &ServiceDescriptor,
        network: &Network,
        options: &PromptOptions,
    ) -> Result<Self, UserError> {
        let mut conn = network
            .connect(&descriptor.address)
            .map_err(|e| UserError::Protocol(e.to_string()))?;

        let (hs, hello) = client_start(&mut OsRng);
        let mut msg = vec![MSG_CLIENT_HELLO];
        msg.extend_from_slice(&hello);
        conn.send_msg(&msg)
            .map_err(|e| UserError::Protocol(e.to_string()))?;
        let reply = conn.recv_msg().map_err(|_| UserError::ServiceCrashed)?;
        match reply.first() {
            Some(&MSG_SERVER_HELLO) => {}
            Some(&MSG_ERROR) => return Err(UserError::ServiceCrashed),
            _ => return Err(UserError::Protocol("unexpected handshake reply".into())),
        }
        let server_hello_bytes = &reply[1..];
        let parsed = crate::channel::ServerHello::decode(server_hello_bytes)?;

        // Step 9: the user requires the descriptor's exact measurement,
        // over and above whatever the verifier policy accepts.
        if parsed.quote.measurement != descriptor.measurement {
            return Err(UserError::AttestationFailed(
                [VerdictReason::MeasurementMismatch].into(),
            ));
        }

        let (channel, verdict) = match options.auth {
            UserAuth::ViaVerifier => {
                let mut vconn = network
                    .connect(&descriptor.verifier_address)
                    .map_err(|e| UserError::Protocol(e.to_string()))?;
                let verdict = request_verdict(vconn.as_mut(), &parsed.quote)
                    .map_err(|e| UserError::Protocol(e.to_string()))?;
                let channel = hs.finish(
                    server_hello_bytes,
                    ClientAuth::Verdict {
                        verifier_public: descriptor.verifier_public,
                        verdict: Some(verdict.clone()),
                    },
                )?;
                (channel, verdict)
            }
            UserAuth::LocalPolicy => {
                let policy = ReferencePolicy::new(
                    [descriptor.measurement],
                    [descriptor.tee_type],
                    [(descriptor.platform_id, descriptor.platform_root_public)],
                )
                .map_err(|e| UserError::Protocol(e.to_string()))?;
                // Throwaway identity: the verdict is consumed locally.
                let local = Verifier::new(policy, SigningKeyPair::generate(&mut OsRng));
                let verdict = local.verify_quote(&parsed.quote);
                let channel = hs.finish(server_hello_bytes, ClientAuth::Policy(&local))?;
                (channel, verdict)
            }
        };

        #[cfg(feature = "insecure-test-hooks")]
        let channel = {
            let mut channel = channel;
            if options.hooks.disable_channel_encryption {
                channel.disable_encryption();
            }
            channel
        };

        let peer_measurement = channel
            .peer_measurement
            .expect("client channels record the peer measurement");
        Ok(ServiceClient {
            conn,
            channel,
            verdict,
            peer_measurement,
        })
    }

    fn call(&mut self, request: &[u8]) -> Result<Vec<u8>, UserError> {
        let frame = self.channel.send(request)?;
        let mut msg = vec![MSG_FRAME];
        msg.extend_from_slice(&frame);
        self.conn
            .send_msg(&msg)
            .map_err(|e| UserError::Protocol(e.to_string()))?;
        let reply = self.conn.recv_msg().map_err(|_| UserError::ServiceCrashed)?;
        if reply.first() != Some(&MSG_FRAME) {
            return Err(UserError::ServiceCrashed);
        }
        let pt = self.channel.recv(&reply[1..])?;
        if pt.first() == Some(&CH_ERR) {
            let code = pt
                .get(1)
                .copied()
                .and_then(ServiceErrorCode::from_code)
                .unwrap_or(ServiceErrorCode::Protocol);
            if code == ServiceErrorCode::Crashed {
                // The service notified us and is closing the connection.
                let closed = self.conn.recv_msg().is_err();
                debug_assert!(closed, "service should close after a crash notice");
                return Err(UserError::ServiceCrashed);
            }
            return Err(UserError::Service(code));
        }
        Ok(pt)
    }

    pub fn prompt(
        &mut self,
        prompt: &TokenSequence,
        beam_width: u32,
        max_new_tokens: u32,
    ) -> Result<TokenSequence, UserError> {
        let mut req = vec![CH_PROMPT];
        wire::put_u32(&mut req, beam_width);
        wire::put_u32(&mut req, max_new_tokens);
        write_tokens(&mut req, prompt);
        let pt = self.call(&req)?;
        let mut r = wire::Reader::new(&pt);
        match r.u8().map_err(|e| UserError::Protocol(e.to_string()))? {
            CH_COMPLETION => {
                read_tokens(&mut r).ok_or_else(|| UserError::Protocol("bad completion".into()))
            }
            _ => Err(UserError::Protocol("unexpected response".into())),
        }
    }

    /// Fetch a fresh model-hash attestation (the step-7 check, repeatable
    /// by anyone holding the descriptor).
    pub fn model_hash_quote(&mut self) -> Result<crate::enclave::AttestationQuote, UserError> {
        let pt = self.call(&[CH_MODEL_HASH_REQ])?;
        parse_quote(&pt)
    }

    /// In-enclave greedy accuracy over a labelled dataset, bound into a
    /// quote.
    pub fn attest_accuracy(
        &mut self,
        dataset: &crate::inference::AccuracyDataset,
    ) -> Result<(crate::inference::AccuracyReport, crate::enclave::AttestationQuote), UserError>
    {
        let mut req = vec![CH_ACCURACY_REQ];
        wire::put_str(&mut req, &crate::inference::render_dataset(dataset));
        let pt = self.call(&req)?;
        let mut r = wire::Reader::new(&pt);
        if r.u8().map_err(|e| UserError::Protocol(e.to_string()))? != CH_ACCURACY_RESP {
            return Err(UserError::Protocol("unexpected response".into()));
        }
        let p = |e: crate::net::NetError| UserError::Protocol(e.to_string());
        let model_digest = crate::crypto::Digest256(r.array::<32>().map_err(p)?);
        let dataset_digest = crate::crypto::Digest256(r.array::<32>().map_err(p)?);
        let correct = r.u64().map_err(p)?;
        let total = r.u64().map_err(p)?;
        let quote = crate::enclave::AttestationQuote::decode(r.rest())
            .ok_or_else(|| UserError::Protocol("malformed quote".into()))?;
        Ok((
            crate::inference::AccuracyReport {
                model_digest,
                dataset_digest,
                correct,
                total,
            },
            quote,
        ))
    }

    /// Training-provenance binding for the loaded model and the given
    /// dataset digest.
    pub fn bind_provenance(
        &mut self,
        dataset_digest: &crate::crypto::Digest256,
    ) -> Result<crate::enclave::AttestationQuote, UserError> {
        let mut req = vec![CH_PROVENANCE_REQ];
        req.extend_from_slice(dataset_digest.as_bytes());
        let pt = self.call(&req)?;
        parse_quote(&pt)
    }
}

fn parse_quote(pt: &[u8]) -> Result<crate::enclave::AttestationQuote, UserError> {
    if pt.first() != Some(&CH_QUOTE) {
        return Err(UserError::Protocol("expected quote response".into()));
    }
    crate::enclave::AttestationQuote::decode(&pt[1..])
        .ok_or_else(|| UserError::Protocol("malformed quote".into()))
}

/// Steps 8-9: attested channel, measurement pinned to the descriptor,
/// prompt in, completion out. An enclave integrity fault mid-session
/// surfaces as `ServiceCrashed` with the connection closed by the server.
pub fn user_prompt(
    descriptor: &ServiceDescriptor,
    prompt: &TokenSequence,
    network: &Network,
    options: &PromptOptions,
) -> Result<PromptOutcome, UserError> {
    let mut client = ServiceClient::connect(descriptor, network, options)?;
    let completion = client.prompt(prompt, options.beam_width, options.max_new_tokens)?;
    Ok(PromptOutcome {
        completion,
        verdict: client.verdict,
        peer_measurement: client.peer_measurement,
    })
}
