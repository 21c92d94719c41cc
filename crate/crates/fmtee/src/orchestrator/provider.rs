//! Model-provider deployment client: the seven-step flow from instance
//! request to published service descriptor, aborting atomically at the
//! first failing step. Step numbers in aborts follow the deployment flow:
//!
//! 1. request the TEE instance (manifest + files + TEE type)
//! 2. receive the instance handle
//! 3. fetch the attestation quote with the channel key bound in it
//! 4. check "is this a valid TEE" via the verifier service
//! 5. compare the measurement against the expected value
//! 6. provision the model key and trigger the encrypted-model load
//! 7. compare the attested model hash, then publish the descriptor
//!
//! No step-6 side effect (package upload, key provisioning) happens until
//! steps 1-5 all passed, and no descriptor exists until step 7 passed.

use rand::rngs::OsRng;
use thiserror::Error;

use crate::channel::{client_start, ClientAuth, SecureChannel, ServerHello};
use crate::crypto::{digest, AeadKey, Digest256};
use crate::enclave::{AttestationQuote, TeeType};
use crate::manifest::FileTree;
use crate::model::EncryptedModelPackage;
use crate::net::{wire, Conn, NetError, Network};
use crate::verifier::{request_verdict, Verdict, VerdictReason};

use super::csp::write_tokens;
use super::*;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeployError {
    #[error("deployment aborted at step {step}: {reason}")]
    Abort { step: u8, reason: AbortReason },
}

impl DeployError {
    fn at(step: u8, reason: AbortReason) -> Self {
        DeployError::Abort { step, reason }
    }

    pub fn step(&self) -> u8 {
        match self {
            DeployError::Abort { step, .. } => *step,
        }
    }

    pub fn reason(&self) -> &AbortReason {
        match self {
            DeployError::Abort { reason, .. } => reason,
        }
    }
}

/// Everything the provider prepared before going to the cloud: the
/// software to run, the expected values to check, and the sealed model.
#[derive(Clone)]
pub struct ProviderConfig {
    pub manifest_text: String,
    pub files: FileTree,
    pub tee_type: TeeType,
    pub expected_measurement: Digest256,
    pub expected_model_digest: Digest256,
    pub verifier_address: String,
    pub verifier_public: [u8; 32],
    pub model_key: AeadKey,
    pub key_id: [u8; 16],
    pub package_name: String,
    pub package: EncryptedModelPackage,
    /// Inert by default; see [`DefenseHooks`].
    pub hooks: DefenseHooks,
}

/// A deployment session: the descriptor plus the still-open attested
/// channel, for flows that keep administering the service (RAG wiring).
pub(crate) struct DeploySession {
    pub descriptor: ServiceDescriptor,
    pub conn: Box<dyn Conn>,
    pub channel: SecureChannel,
}

/// Run steps 1-7 against a CSP and publish the service descriptor.
pub fn provider_deploy(
    cfg: &ProviderConfig,
    network: &Network,
    csp_address: &str,
) -> Result<ServiceDescriptor, DeployError> {
    deploy_session(cfg, network, csp_address).map(|s| s.descriptor)
}

pub(crate) fn deploy_session(
    cfg: &ProviderConfig,
    network: &Network,
    csp_address: &str,
) -> Result<DeploySession, DeployError> {
    let proto = |step: u8| {
        move |e: NetError| DeployError::at(step, AbortReason::Protocol(e.to_string()))
    };

    // Step 1: request the instance, specifying the software.
    let mut csp = network.connect(csp_address).map_err(proto(1))?;
    let mut req = vec![MSG_DEPLOY_REQ];
    wire::put_u8(&mut req, cfg.tee_type.code());
    wire::put_str(&mut req, &cfg.manifest_text);
    wire::put_u32(&mut req, cfg.files.len() as u32);
    for (path, content) in cfg.files.iter() {
        wire::put_str(&mut req, path);
        wire::put_bytes(&mut req, content);
    }
    csp.send_msg(&req).map_err(proto(1))?;

    // Step 2: the handle (instance address + platform id).
    let resp = csp.recv_msg().map_err(proto(2))?;
    let (address, _platform_id) = match resp.first() {
        Some(&MSG_DEPLOY_RESP) => {
            let mut r = wire::Reader::new(&resp[1..]);
            let address = r
                .str()
                .map_err(|e| DeployError::at(2, AbortReason::Protocol(e.to_string())))?;
            let platform_id: [u8; 16] = r
                .array()
                .map_err(|e| DeployError::at(2, AbortReason::Protocol(e.to_string())))?;
            (address, platform_id)
        }
        Some(&MSG_ERROR) => {
            let mut r = wire::Reader::new(&resp[1..]);
            let text = r.str().unwrap_or_else(|_| "unreadable error".into());
            return Err(DeployError::at(1, AbortReason::Validation(text)));
        }
        _ => {
            return Err(DeployError::at(
                2,
                AbortReason::Protocol("unexpected CSP reply".into()),
            ))
        }
    };

    // Step 3: open the handshake and obtain the quote with the channel
    // key bound into its report data.
    let mut conn = network.connect(&address).map_err(proto(3))?;
    let (hs, hello) = client_start(&mut OsRng);
    let mut msg = vec![MSG_CLIENT_HELLO];
    msg.extend_from_slice(&hello);
    conn.send_msg(&msg).map_err(proto(3))?;
    let reply = conn.recv_msg().map_err(proto(3))?;
    if reply.first() != Some(&MSG_SERVER_HELLO) {
        return Err(DeployError::at(
            3,
            AbortReason::Protocol("instance refused handshake".into()),
        ));
    }
    let server_hello_bytes = reply[1..].to_vec();
    let server_hello = ServerHello::decode(&server_hello_bytes)
        .map_err(|e| DeployError::at(3, AbortReason::Protocol(e.to_string())))?;
    if server_hello.quote.report_data != *digest(&server_hello.ephemeral_public).as_bytes() {
        return Err(DeployError::at(3, AbortReason::KeyBindingMismatch));
    }

    // Step 4: the verifier service decides whether this is a valid TEE.
    let verdict = fetch_verdict(network, &cfg.verifier_address, &cfg.verifier_public, &server_hello.quote)
        .map_err(|reason| DeployError::at(4, reason))?;
    let mut validity_reasons = verdict.reasons.clone();
    let measurement_rejected = validity_reasons.remove(&VerdictReason::MeasurementMismatch);
    if !validity_reasons.is_empty() {
        return Err(DeployError::at(
            4,
            AbortReason::AttestationFailed(validity_reasons),
        ));
    }

    // Step 5: the software must be exactly what the provider built.
    let measurement_ok =
        !measurement_rejected && server_hello.quote.measurement == cfg.expected_measurement;
    if !measurement_ok && !cfg.hooks.measurement_check_disabled() {
        return Err(DeployError::at(5, AbortReason::MeasurementMismatch));
    }

    let mut channel = if measurement_ok {
        hs.finish(
            &server_hello_bytes,
            ClientAuth::Verdict {
                verifier_public: cfg.verifier_public,
                verdict: Some(verdict),
            },
        )
        .map_err(|e| DeployError::at(5, AbortReason::Protocol(e.to_string())))?
    } else {
        // Measurement check disabled (negative-control hook): accept
        // whatever software is running via a permissive local policy.
        let permissive = crate::verifier::ReferencePolicy::new(
            [server_hello.quote.measurement],
            [server_hello.quote.tee_type],
            [(
                server_hello.quote.platform_id,
                fetch_platform_root(network, csp_address)
                    .map_err(|r| DeployError::at(5, r))?,
            )],
        )
        .map_err(|e| DeployError::at(5, AbortReason::Protocol(e.to_string())))?;
        let local = crate::verifier::Verifier::new(
            permissive,
            crate::crypto::SigningKeyPair::generate(&mut OsRng),
        );
        hs.finish(&server_hello_bytes, ClientAuth::Policy(&local))
            .map_err(|e| DeployError::at(5, AbortReason::Protocol(e.to_string())))?
    };

    #[cfg(feature = "insecure-test-hooks")]
    if cfg.hooks.disable_channel_encryption {
        channel.disable_encryption();
    }

    // Step 6: upload the sealed package to host storage, provision the
    // model key inside the attested channel, and trigger the load.
    let mut put = vec![MSG_PUT_PACKAGE];
    wire::put_str(&mut put, &cfg.package_name);
    wire::put_bytes(&mut put, &cfg.package.encode());
    csp.send_msg(&put).map_err(proto(6))?;
    let ack = csp.recv_msg().map_err(proto(6))?;
    if ack.first() != Some(&MSG_OK) {
        return Err(DeployError::at(
            6,
            AbortReason::Protocol("package upload rejected".into()),
        ));
    }

    let mut provision = vec![CH_PROVISION_KEY];
    provision.extend_from_slice(&cfg.key_id);
    provision.extend_from_slice(&cfg.model_key.0);
    channel_call(&mut conn, &mut channel, &provision).map_err(|r| DeployError::at(6, r))?;

    let mut load = vec![CH_LOAD_MODEL];
    wire::put_str(&mut load, &cfg.package_name);
    load.extend_from_slice(&cfg.key_id);
    channel_call(&mut conn, &mut channel, &load).map_err(|r| DeployError::at(6, r))?;

    // Step 7: attested model hash must equal the digest of the model the
    // provider shipped.
    let quote_resp = channel_call(&mut conn, &mut channel, &[CH_MODEL_HASH_REQ])
        .map_err(|r| DeployError::at(7, r))?;
    let hash_quote = parse_quote_response(&quote_resp)
        .map_err(|r| DeployError::at(7, r))?;
    if !cfg.hooks.model_hash_check_disabled() {
        let hash_verdict =
            fetch_verdict(network, &cfg.verifier_address, &cfg.verifier_public, &hash_quote)
                .map_err(|reason| DeployError::at(7, reason))?;
        if !hash_verdict.passed && !cfg.hooks.measurement_check_disabled() {
            return Err(DeployError::at(
                7,
                AbortReason::AttestationFailed(hash_verdict.reasons),
            ));
        }
        if hash_quote.report_data != *cfg.expected_model_digest.as_bytes() {
            return Err(DeployError::at(7, AbortReason::ModelDigestMismatch));
        }
    }

    let descriptor = ServiceDescriptor {
        address,
        tee_type: hash_quote.tee_type,
        measurement: hash_quote.measurement,
        model_digest: cfg.expected_model_digest,
        platform_id: hash_quote.platform_id,
        platform_root_public: fetch_platform_root(network, csp_address)
            .map_err(|r| DeployError::at(7, r))?,
        verifier_address: cfg.verifier_address.clone(),
        verifier_public: cfg.verifier_public,
    };
    Ok(DeploySession {
        descriptor,
        conn,
        channel,
    })
}

/// One request/response over the attested channel. `CH_ERR` responses are
/// mapped into abort reasons.
pub(crate) fn channel_call(
    conn: &mut Box<dyn Conn>,
    channel: &mut SecureChannel,
    request: &[u8],
) -> Result<Vec<u8>, AbortReason> {
    let frame = channel
        .send(request)
        .map_err(|e| AbortReason::Protocol(e.to_string()))?;
    let mut msg = vec![MSG_FRAME];
    msg.extend_from_slice(&frame);
    conn.send_msg(&msg)
        .map_err(|e| AbortReason::Protocol(e.to_string()))?;
    let reply = conn
        .recv_msg()
        .map_err(|e| AbortReason::Protocol(e.to_string()))?;
    if reply.first() != Some(&MSG_FRAME) {
        return Err(AbortReason::Protocol("service closed the channel".into()));
    }
    let pt = channel
        .recv(&reply[1..])
        .map_err(|e| AbortReason::Protocol(e.to_string()))?;
    if pt.first() == Some(&CH_ERR) {
        let code = pt
            .get(1)
            .copied()
            .and_then(ServiceErrorCode::from_code)
            .unwrap_or(ServiceErrorCode::Protocol);
        return Err(AbortReason::ModelLoad(code));
    }
    Ok(pt)
}

fn parse_quote_response(resp: &[u8]) -> Result<AttestationQuote, AbortReason> {
    if resp.first() != Some(&CH_QUOTE) {
        return Err(AbortReason::Protocol("expected quote response".into()));
    }
    AttestationQuote::decode(&resp[1..])
        .ok_or_else(|| AbortReason::Protocol("malformed quote".into()))
}

fn fetch_verdict(
    network: &Network,
    verifier_address: &str,
    verifier_public: &[u8; 32],
    quote: &AttestationQuote,
) -> Result<Verdict, AbortReason> {
    let mut conn = network
        .connect(verifier_address)
        .map_err(|e| AbortReason::Protocol(e.to_string()))?;
    let verdict = request_verdict(conn.as_mut(), quote)
        .map_err(|e| AbortReason::Protocol(e.to_string()))?;
    if !verdict.verify(verifier_public) {
        return Err(AbortReason::Protocol("verdict signature invalid".into()));
    }
    if !verdict.covers(quote) {
        return Err(AbortReason::Protocol("verdict covers a different quote".into()));
    }
    Ok(verdict)
}

fn fetch_platform_root(network: &Network, csp_address: &str) -> Result<[u8; 32], AbortReason> {
    let mut conn = network
        .connect(csp_address)
        .map_err(|e| AbortReason::Protocol(e.to_string()))?;
    conn.send_msg(&[MSG_PLATFORM_INFO])
        .map_err(|e| AbortReason::Protocol(e.to_string()))?;
    let resp = conn
        .recv_msg()
        .map_err(|e| AbortReason::Protocol(e.to_string()))?;
    if resp.first() != Some(&MSG_PLATFORM_INFO_RESP) {
        return Err(AbortReason::Protocol("bad platform info".into()));
    }
    let mut r = wire::Reader::new(&resp[1..]);
    let _platform_id: [u8; 16] = r
        .array()
        .map_err(|e| AbortReason::Protocol(e.to_string()))?;
    r.array().map_err(|e| AbortReason::Protocol(e.to_string()))
}

/// Software and expected values for the retrieval service. The document
/// index is provisioned over the attested channel at step 6 and its
/// digest attested at step 7, mirroring the model flow.
pub struct RagConfig {
    pub manifest_text: String,
    pub files: FileTree,
    pub tee_type: TeeType,
    pub expected_measurement: Digest256,
    pub docs: DocumentIndex,
    pub verifier_address: String,
    pub verifier_public: [u8; 32],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainDescriptor {
    pub inference: ServiceDescriptor,
    pub rag: ServiceDescriptor,
}

/// Deploy a RAG service (steps 1-7 with documents in place of a model),
/// deploy the inference service, and hand the inference enclave the RAG
/// descriptor so it opens its own attested connection. Any attestation
/// failure aborts the chain.
pub fn deploy_rag_chain(
    inference_cfg: &ProviderConfig,
    rag_cfg: &RagConfig,
    network: &Network,
    csp_address: &str,
) -> Result<ChainDescriptor, DeployError> {
    let rag = deploy_rag_service(rag_cfg, network, csp_address)?;

    let mut inference = deploy_session(inference_cfg, network, csp_address)?;
    let mut set_rag = vec![CH_SET_RAG];
    wire::put_str(&mut set_rag, &rag.render());
    channel_call(&mut inference.conn, &mut inference.channel, &set_rag).map_err(|r| {
        // The inference enclave refused the RAG attestation.
        DeployError::at(7, r)
    })?;

    Ok(ChainDescriptor {
        inference: inference.descriptor,
        rag,
    })
}

fn deploy_rag_service(
    cfg: &RagConfig,
    network: &Network,
    csp_address: &str,
) -> Result<ServiceDescriptor, DeployError> {
    // Steps 1-5 are shared with the model flow; reuse them through a
    // ProviderConfig shell with no package involved.
    let proto = |step: u8| {
        move |e: NetError| DeployError::at(step, AbortReason::Protocol(e.to_string()))
    };

    let mut csp = network.connect(csp_address).map_err(proto(1))?;
    let mut req = vec![MSG_DEPLOY_REQ];
    wire::put_u8(&mut req, cfg.tee_type.code());
    wire::put_str(&mut req, &cfg.manifest_text);
    wire::put_u32(&mut req, cfg.files.len() as u32);
    for (path, content) in cfg.files.iter() {
        wire::put_str(&mut req, path);
        wire::put_bytes(&mut req, content);
    }
    csp.send_msg(&req).map_err(proto(1))?;
    let resp = csp.recv_msg().map_err(proto(2))?;
    let address = match resp.first() {
        Some(&MSG_DEPLOY_RESP) => {
            let mut r = wire::Reader::new(&resp[1..]);
            r.str()
                .map_err(|e| DeployError::at(2, AbortReason::Protocol(e.to_string())))?
        }
        Some(&MSG_ERROR) => {
            let mut r = wire::Reader::new(&resp[1..]);
            let text = r.str().unwrap_or_else(|_| "unreadable error".into());
            return Err(DeployError::at(1, AbortReason::Validation(text)));
        }
        _ => {
            return Err(DeployError::at(
                2,
                AbortReason::Protocol("unexpected CSP reply".into()),
            ))
        }
    };

    let mut conn = network.connect(&address).map_err(proto(3))?;
    let (hs, hello) = client_start(&mut OsRng);
    let mut msg = vec![MSG_CLIENT_HELLO];
    msg.extend_from_slice(&hello);
    conn.send_msg(&msg).map_err(proto(3))?;
    let reply = conn.recv_msg().map_err(proto(3))?;
    if reply.first() != Some(&MSG_SERVER_HELLO) {
        return Err(DeployError::at(
            3,
            AbortReason::Protocol("instance refused handshake".into()),
        ));
    }
    let server_hello_bytes = reply[1..].to_vec();
    let server_hello = ServerHello::decode(&server_hello_bytes)
        .map_err(|e| DeployError::at(3, AbortReason::Protocol(e.to_string())))?;
    if server_hello.quote.report_data != *digest(&server_hello.ephemeral_public).as_bytes() {
        return Err(DeployError::at(3, AbortReason::KeyBindingMismatch));
    }

    let verdict = fetch_verdict(network, &cfg.verifier_address, &cfg.verifier_public, &server_hello.quote)
        .map_err(|reason| DeployError::at(4, reason))?;
    let mut validity_reasons = verdict.reasons.clone();
    let measurement_rejected = validity_reasons.remove(&VerdictReason::MeasurementMismatch);
    if !validity_reasons.is_empty() {
        return Err(DeployError::at(
            4,
            AbortReason::AttestationFailed(validity_reasons),
        ));
    }
    if measurement_rejected || server_hello.quote.measurement != cfg.expected_measurement {
        return Err(DeployError::at(5, AbortReason::MeasurementMismatch));
    }
    let mut channel = hs
        .finish(
            &server_hello_bytes,
            ClientAuth::Verdict {
                verifier_public: cfg.verifier_public,
                verdict: Some(verdict),
            },
        )
        .map_err(|e| DeployError::at(5, AbortReason::Protocol(e.to_string())))?;

    // Step 6: documents travel only inside the attested channel.
    let mut provision = vec![CH_PROVISION_DOCS];
    wire::put_u32(&mut provision, cfg.docs.len() as u32);
    for (key, doc) in &cfg.docs {
        write_tokens(&mut provision, key);
        write_tokens(&mut provision, doc);
    }
    channel_call(&mut conn, &mut channel, &provision).map_err(|r| DeployError::at(6, r))?;

    // Step 7: attested document-index hash.
    let quote_resp =
        channel_call(&mut conn, &mut channel, &[CH_DOCS_HASH_REQ]).map_err(|r| DeployError::at(7, r))?;
    let hash_quote = parse_quote_response(&quote_resp).map_err(|r| DeployError::at(7, r))?;
    if hash_quote.report_data != *docs_digest(&cfg.docs).as_bytes() {
        return Err(DeployError::at(7, AbortReason::ModelDigestMismatch));
    }

    Ok(ServiceDescriptor {
        address,
        tee_type: hash_quote.tee_type,
        measurement: hash_quote.measurement,
        model_digest: docs_digest(&cfg.docs),
        platform_id: hash_quote.platform_id,
        platform_root_public: fetch_platform_root(network, csp_address)
            .map_err(|r| DeployError::at(7, r))?,
        verifier_address: cfg.verifier_address.clone(),
        verifier_public: cfg.verifier_public,
    })
}
