//! CSP host service: allocates TEE instances on its platform and runs the
//! in-enclave service loop for each. Also exposes the privileged host
//! surface (tamper / garbled read / package store) that models what a
//! rogue administrator can reach; none of it goes through the enclave's
//! owner token.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::rngs::OsRng;

use crate::channel::{handshake_server, ChannelError, SecureChannel};
use crate::crypto::ExchangeKeyPair;
use crate::enclave::{Enclave, EnclaveError, OwnerToken, PlatformRoot, TeeType};
use crate::inference::{
    bind_training_provenance, evaluate_and_attest_accuracy, parse_dataset,
    GenerationConfig, Generator, TokenSequence,
};
use crate::manifest::{parse_manifest, FileTree};
use crate::model::{attest_model_hash, EncryptedModelPackage, EnclaveModel, ModelError};
use crate::net::{wire, Conn, Listener, Network, TapLog};
use crate::verifier::{ReferencePolicy, Verifier};

use super::*;

/// How the CSP behaves during deployments. The dishonest variants model
/// the organized type-three adversary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CspBehavior {
    Honest,
    /// Launch from a silently modified trusted file (one byte of the
    /// entrypoint flipped before measurement).
    SwapSoftware,
    /// Serve a different stored package when the enclave loads a model.
    SwapModel { replacement: String },
}

/// Host-side record of a running instance, exposed for harness
/// introspection and the adversary's tamper endpoints.
pub struct InstanceInfo {
    pub address: String,
    pub enclave: Arc<Enclave>,
    pub tap: Arc<TapLog>,
    token: OwnerToken,
    service: Mutex<ServiceState>,
    network: Network,
    packages: Arc<Mutex<HashMap<String, Vec<u8>>>>,
    behavior: CspBehavior,
    hooks: DefenseHooks,
}

#[derive(Default)]
struct ServiceState {
    model: Option<EnclaveModel>,
    docs: Option<DocumentIndex>,
    rag: Option<RagSession>,
}

struct RagSession {
    conn: Box<dyn Conn>,
    channel: SecureChannel,
}

impl InstanceInfo {
    /// True once step 6 stored a sealed key under any id. Host-side
    /// introspection for the step-ordering checks (uses the service's own
    /// token, which an external host would not hold).
    pub fn has_provisioned_key(&self, key_id: [u8; 16]) -> bool {
        matches!(self.enclave.sealed_blob(&self.token, key_id), Ok(Some(_)))
    }

    pub fn has_model(&self) -> bool {
        self.service.lock().unwrap().model.is_some()
    }
}

pub struct CspHost {
    platform: PlatformRoot,
    network: Network,
    behavior: CspBehavior,
    hooks: DefenseHooks,
    packages: Arc<Mutex<HashMap<String, Vec<u8>>>>,
    instances: Mutex<HashMap<String, Arc<InstanceInfo>>>,
}

impl CspHost {
    pub fn new(platform: PlatformRoot, network: Network, behavior: CspBehavior) -> Arc<Self> {
        Self::with_hooks(platform, network, behavior, DefenseHooks::default())
    }

    pub fn with_hooks(
        platform: PlatformRoot,
        network: Network,
        behavior: CspBehavior,
        hooks: DefenseHooks,
    ) -> Arc<Self> {
        Arc::new(CspHost {
            platform,
            network,
            behavior,
            hooks,
            packages: Arc::new(Mutex::new(HashMap::new())),
            instances: Mutex::new(HashMap::new()),
        })
    }

    pub fn platform_id(&self) -> [u8; 16] {
        self.platform.platform_id()
    }

    pub fn root_public(&self) -> [u8; 32] {
        self.platform.root_public()
    }

    pub fn tee_type(&self) -> TeeType {
        self.platform.tee_type()
    }

    /// Store a package in the host-side (untrusted) package store.
    pub fn put_package(&self, name: &str, bytes: Vec<u8>) {
        self.packages.lock().unwrap().insert(name.to_string(), bytes);
    }

    pub fn instance(&self, address: &str) -> Option<Arc<InstanceInfo>> {
        self.instances.lock().unwrap().get(address).cloned()
    }

    pub fn instances(&self) -> Vec<Arc<InstanceInfo>> {
        self.instances.lock().unwrap().values().cloned().collect()
    }

    /// Accept CSP control connections until the listener closes.
    pub fn serve(self: &Arc<Self>, mut listener: Box<dyn Listener>) {
        loop {
            let mut conn = match listener.accept() {
                Ok(c) => c,
                Err(_) => return,
            };
            let host = Arc::clone(self);
            std::thread::spawn(move || {
                while let Ok(msg) = conn.recv_msg() {
                    let reply = host.handle(&msg);
                    if conn.send_msg(&reply).is_err() {
                        break;
                    }
                }
            });
        }
    }

    fn handle(self: &Arc<Self>, msg: &[u8]) -> Vec<u8> {
        match self.try_handle(msg) {
            Ok(reply) => reply,
            Err(text) => {
                let mut out = vec![MSG_ERROR];
                wire::put_str(&mut out, &text);
                out
            }
        }
    }

    fn try_handle(self: &Arc<Self>, msg: &[u8]) -> Result<Vec<u8>, String> {
        let mut r = wire::Reader::new(msg);
        match r.u8().map_err(|e| e.to_string())? {
            MSG_DEPLOY_REQ => {
                let tee_type = TeeType::from_code(r.u8().map_err(|e| e.to_string())?)
                    .ok_or("bad tee type")?;
                let manifest_text = r.str().map_err(|e| e.to_string())?;
                let nfiles = r.u32().map_err(|e| e.to_string())?;
                let mut tree = FileTree::new();
                for _ in 0..nfiles {
                    let path = r.str().map_err(|e| e.to_string())?;
                    let content = r.bytes().map_err(|e| e.to_string())?;
                    tree.insert(&path, content.to_vec()).map_err(|e| e.to_string())?;
                }
                let (address, platform_id) = self.deploy(tee_type, &manifest_text, tree)?;
                let mut out = vec![MSG_DEPLOY_RESP];
                wire::put_str(&mut out, &address);
                out.extend_from_slice(&platform_id);
                Ok(out)
            }
            MSG_PUT_PACKAGE => {
                let name = r.str().map_err(|e| e.to_string())?;
                let bytes = r.bytes().map_err(|e| e.to_string())?;
                self.put_package(&name, bytes.to_vec());
                Ok(vec![MSG_OK])
            }
            MSG_PLATFORM_INFO => {
                let mut out = vec![MSG_PLATFORM_INFO_RESP];
                out.extend_from_slice(&self.platform.platform_id());
                out.extend_from_slice(&self.platform.root_public());
                out.push(self.platform.tee_type().code());
                Ok(out)
            }
            MSG_HOST_TAMPER => {
                let address = r.str().map_err(|e| e.to_string())?;
                let offset = r.u64().map_err(|e| e.to_string())?;
                let data = r.bytes().map_err(|e| e.to_string())?;
                let instance = self.instance(&address).ok_or("unknown instance")?;
                instance.enclave.host_write(offset, data);
                Ok(vec![MSG_OK])
            }
            MSG_HOST_READ => {
                let address = r.str().map_err(|e| e.to_string())?;
                let offset = r.u64().map_err(|e| e.to_string())?;
                let len = r.u32().map_err(|e| e.to_string())? as usize;
                let instance = self.instance(&address).ok_or("unknown instance")?;
                let bytes = instance.enclave.host_read(offset, len);
                let mut out = vec![MSG_BYTES];
                wire::put_bytes(&mut out, &bytes);
                Ok(out)
            }
            other => Err(format!("unknown message type {other:#04x}")),
        }
    }

    /// Allocate an instance: validate, (mis)launch per behavior, and start
    /// the in-enclave service on a fresh address.
    fn deploy(
        self: &Arc<Self>,
        tee_type: TeeType,
        manifest_text: &str,
        mut tree: FileTree,
    ) -> Result<(String, [u8; 16]), String> {
        if tee_type != self.platform.tee_type() {
            return Err(format!(
                "VALIDATION_FAILED: platform hosts {} TEEs, request asked for {}",
                self.platform.tee_type(),
                tee_type
            ));
        }
        let manifest = parse_manifest(manifest_text)
            .map_err(|e| format!("VALIDATION_FAILED: {e}"))?;

        if self.behavior == CspBehavior::SwapSoftware {
            // The dishonest CSP quietly launches modified software.
            let entry = manifest.entrypoint.clone();
            if let Some(content) = tree.get(&entry).map(|c| c.to_vec()) {
                let mut modified = content;
                if let Some(b) = modified.first_mut() {
                    *b ^= 0x01;
                }
                tree.insert(&entry, modified).map_err(|e| e.to_string())?;
            }
        }

        let (enclave, token) = self
            .platform
            .launch(&manifest, &tree, &mut OsRng)
            .map_err(|e| format!("VALIDATION_FAILED: {e}"))?;

        #[cfg(feature = "insecure-test-hooks")]
        {
            if self.hooks.disable_integrity_checks {
                enclave.disable_integrity_checks(&token).ok();
            }
            if self.hooks.disable_memory_garbling {
                enclave.disable_memory_garbling(&token).ok();
            }
        }

        let address = self.network.ephemeral_addr("instance");
        let tap = TapLog::new();
        let mut listener = self
            .network
            .listen_tapped(&address, Some(Arc::clone(&tap)))
            .map_err(|e| e.to_string())?;
        // TCP binds to port 0; advertise the resolved address.
        let address = listener.local_addr();

        let instance = Arc::new(InstanceInfo {
            address: address.clone(),
            enclave: Arc::new(enclave),
            tap,
            token,
            service: Mutex::new(ServiceState::default()),
            network: self.network.clone(),
            packages: Arc::clone(&self.packages),
            behavior: self.behavior.clone(),
            hooks: self.hooks,
        });
        self.instances
            .lock()
            .unwrap()
            .insert(address.clone(), Arc::clone(&instance));

        std::thread::spawn(move || loop {
            let conn = match listener.accept() {
                Ok(c) => c,
                Err(_) => return,
            };
            let instance = Arc::clone(&instance);
            std::thread::spawn(move || serve_instance_conn(instance, conn));
        });

        Ok((address, self.platform.platform_id()))
    }
}

/// One client session against the enclave service: attested handshake,
/// then framed request/response until the peer goes away or the enclave
/// crashes (which closes the connection, notifying the user).
fn serve_instance_conn(instance: Arc<InstanceInfo>, mut conn: Box<dyn Conn>) {
    let hello = match conn.recv_msg() {
        Ok(msg) if msg.first() == Some(&MSG_CLIENT_HELLO) => msg[1..].to_vec(),
        _ => return,
    };

    // Ephemeral exchange key generated inside the enclave context.
    let exchange = ExchangeKeyPair::generate(&mut OsRng);
    let (server_hello, mut channel) =
        match handshake_server(&instance.enclave, &instance.token, exchange, &hello, None) {
            Ok(pair) => pair,
            Err(_) => {
                // Crashed enclave (or bad hello): notify and close.
                let mut out = vec![MSG_ERROR];
                wire::put_str(&mut out, "service crashed");
                let _ = conn.send_msg(&out);
                return;
            }
        };

    #[cfg(feature = "insecure-test-hooks")]
    if instance.hooks.disable_channel_encryption {
        channel.disable_encryption();
    }

    let mut reply = vec![MSG_SERVER_HELLO];
    reply.extend_from_slice(&server_hello);
    if conn.send_msg(&reply).is_err() {
        return;
    }

    loop {
        let msg = match conn.recv_msg() {
            Ok(m) => m,
            Err(_) => return,
        };
        if msg.first() != Some(&MSG_FRAME) {
            let mut out = vec![MSG_ERROR];
            wire::put_str(&mut out, "expected FRAME");
            let _ = conn.send_msg(&out);
            continue;
        }
        let request = match channel.recv(&msg[1..]) {
            Ok(pt) => pt,
            Err(_) => {
                let mut out = vec![MSG_ERROR];
                wire::put_str(&mut out, "channel error");
                let _ = conn.send_msg(&out);
                continue;
            }
        };

        let (response, crash) = dispatch_in_channel(&instance, &request);
        let frame = match channel.send(&response) {
            Ok(f) => f,
            Err(_) => return,
        };
        let mut out = vec![MSG_FRAME];
        out.extend_from_slice(&frame);
        if conn.send_msg(&out).is_err() {
            return;
        }
        if crash {
            // Integrity fault: the service notifies the user (the CH_ERR
            // just sent) and closes the connection.
            return;
        }
    }
}

fn ch_err(code: ServiceErrorCode, msg: &str) -> Vec<u8> {
    let mut out = vec![CH_ERR, code.code()];
    wire::put_str(&mut out, msg);
    out
}

fn err_from_model(e: &ModelError) -> Vec<u8> {
    let code = match e {
        ModelError::DecryptFail => ServiceErrorCode::DecryptFail,
        ModelError::DigestMismatch => ServiceErrorCode::DigestMismatch,
        ModelError::KeyNotProvisioned => ServiceErrorCode::KeyNotProvisioned,
        ModelError::NoModelLoaded => ServiceErrorCode::NoModelLoaded,
        ModelError::Enclave(EnclaveError::IntegrityFault | EnclaveError::Crashed) => {
            ServiceErrorCode::Crashed
        }
        _ => ServiceErrorCode::Protocol,
    };
    ch_err(code, &e.to_string())
}

/// Handle one decrypted in-channel request. Returns the response payload
/// and whether the enclave crashed while serving it.
fn dispatch_in_channel(instance: &Arc<InstanceInfo>, request: &[u8]) -> (Vec<u8>, bool) {
    let crashed = |out: Vec<u8>| {
        let crash = out.len() >= 2
            && out[0] == CH_ERR
            && out[1] == ServiceErrorCode::Crashed.code();
        (out, crash)
    };
    let mut r = wire::Reader::new(request);
    let msg_type = match r.u8() {
        Ok(t) => t,
        Err(_) => return (ch_err(ServiceErrorCode::Protocol, "empty request"), false),
    };

    match msg_type {
        CH_PROVISION_KEY => {
            let (key_id, key) = match (r.array::<16>(), r.array::<32>()) {
                (Ok(id), Ok(k)) => (id, k),
                _ => return (ch_err(ServiceErrorCode::Protocol, "bad provision"), false),
            };
            match instance
                .enclave
                .seal(&instance.token, key_id, &key, &mut OsRng)
            {
                Ok(_) => (vec![CH_OK], false),
                Err(EnclaveError::Crashed) => {
                    crashed(ch_err(ServiceErrorCode::Crashed, "enclave crashed"))
                }
                Err(e) => (ch_err(ServiceErrorCode::Protocol, &e.to_string()), false),
            }
        }
        CH_LOAD_MODEL => {
            let (name, key_id) = match (r.str(), r.array::<16>()) {
                (Ok(n), Ok(k)) => (n, k),
                _ => return (ch_err(ServiceErrorCode::Protocol, "bad load request"), false),
            };
            // The enclave asks the untrusted host for the package bytes; a
            // dishonest CSP may hand back a different package here.
            let effective = match &instance.behavior {
                CspBehavior::SwapModel { replacement } => replacement.clone(),
                _ => name,
            };
            let bytes = match instance.packages.lock().unwrap().get(&effective).cloned() {
                Some(b) => b,
                None => {
                    return (
                        ch_err(ServiceErrorCode::Protocol, "package not found on host"),
                        false,
                    )
                }
            };
            let pkg = match EncryptedModelPackage::decode(&bytes) {
                Ok(p) => p,
                Err(e) => return (err_from_model(&e), false),
            };
            let loaded = crate::model::unpack_model_inner(
                &instance.enclave,
                &instance.token,
                &pkg,
                key_id,
                instance.hooks.package_auth_disabled(),
            );
            match loaded {
                Ok(model) => {
                    instance.service.lock().unwrap().model = Some(model);
                    (vec![CH_OK], false)
                }
                Err(e) => crashed(err_from_model(&e)),
            }
        }
        CH_MODEL_HASH_REQ => {
            let service = instance.service.lock().unwrap();
            let Some(model) = service.model.as_ref() else {
                return (ch_err(ServiceErrorCode::NoModelLoaded, "no model"), false);
            };
            match attest_model_hash(&instance.enclave, &instance.token, model) {
                Ok(quote) => {
                    let mut out = vec![CH_QUOTE];
                    out.extend_from_slice(&quote.encode());
                    (out, false)
                }
                Err(e) => crashed(err_from_model(&e)),
            }
        }
        CH_PROMPT => handle_prompt(instance, &mut r),
        CH_ACCURACY_REQ => {
            let text = match r.str() {
                Ok(t) => t,
                Err(_) => return (ch_err(ServiceErrorCode::Protocol, "bad dataset"), false),
            };
            let dataset = match parse_dataset(&text) {
                Ok(d) => d,
                Err(e) => return (ch_err(ServiceErrorCode::Protocol, &e.to_string()), false),
            };
            let service = instance.service.lock().unwrap();
            let Some(model) = service.model.as_ref() else {
                return (ch_err(ServiceErrorCode::NoModelLoaded, "no model"), false);
            };
            match evaluate_and_attest_accuracy(&instance.enclave, &instance.token, model, &dataset)
            {
                Ok((report, quote)) => {
                    let mut out = vec![CH_ACCURACY_RESP];
                    out.extend_from_slice(report.model_digest.as_bytes());
                    out.extend_from_slice(report.dataset_digest.as_bytes());
                    wire::put_u64(&mut out, report.correct);
                    wire::put_u64(&mut out, report.total);
                    out.extend_from_slice(&quote.encode());
                    (out, false)
                }
                Err(e) => (ch_err(ServiceErrorCode::Protocol, &e.to_string()), false),
            }
        }
        CH_PROVENANCE_REQ => {
            let dataset_digest = match r.array::<32>() {
                Ok(d) => crate::crypto::Digest256(d),
                Err(_) => return (ch_err(ServiceErrorCode::Protocol, "bad digest"), false),
            };
            let service = instance.service.lock().unwrap();
            let Some(model) = service.model.as_ref() else {
                return (ch_err(ServiceErrorCode::NoModelLoaded, "no model"), false);
            };
            match bind_training_provenance(
                &instance.enclave,
                &instance.token,
                &dataset_digest,
                &model.model_digest,
            ) {
                Ok(quote) => {
                    let mut out = vec![CH_QUOTE];
                    out.extend_from_slice(&quote.encode());
                    (out, false)
                }
                Err(e) => (ch_err(ServiceErrorCode::Protocol, &e.to_string()), false),
            }
        }
        CH_SET_RAG => {
            let text = match r.str() {
                Ok(t) => t,
                Err(_) => return (ch_err(ServiceErrorCode::Protocol, "bad descriptor"), false),
            };
            let descriptor = match ServiceDescriptor::parse(&text) {
                Ok(d) => d,
                Err(e) => return (ch_err(ServiceErrorCode::Protocol, &e), false),
            };
            match open_rag_session(instance, &descriptor) {
                Ok(session) => {
                    instance.service.lock().unwrap().rag = Some(session);
                    (vec![CH_OK], false)
                }
                Err(e) => (ch_err(ServiceErrorCode::RagAttestation, &e), false),
            }
        }
        CH_PROVISION_DOCS => {
            let count = match r.u32() {
                Ok(c) => c,
                Err(_) => return (ch_err(ServiceErrorCode::Protocol, "bad docs"), false),
            };
            let mut docs = Vec::with_capacity(count as usize);
            for _ in 0..count {
                let key = read_tokens(&mut r);
                let doc = read_tokens(&mut r);
                match (key, doc) {
                    (Some(k), Some(d)) => docs.push((k, d)),
                    _ => return (ch_err(ServiceErrorCode::Protocol, "bad docs"), false),
                }
            }
            // Materialize the rendered index into protected pages so the
            // documents live under enclave protection.
            let rendered = render_docs(&docs);
            let store = instance
                .enclave
                .alloc(&instance.token, rendered.len())
                .and_then(|offset| {
                    instance
                        .enclave
                        .write(&instance.token, offset, rendered.as_bytes())
                        .map(|_| offset)
                })
                .and_then(|offset| {
                    instance.enclave.register_region(
                        &instance.token,
                        "docs",
                        crate::enclave::Region {
                            offset,
                            len: rendered.len() as u64,
                        },
                    )
                });
            match store {
                Ok(()) => {
                    instance.service.lock().unwrap().docs = Some(docs);
                    (vec![CH_OK], false)
                }
                Err(EnclaveError::Crashed | EnclaveError::IntegrityFault) => {
                    crashed(ch_err(ServiceErrorCode::Crashed, "enclave crashed"))
                }
                Err(e) => (ch_err(ServiceErrorCode::Protocol, &e.to_string()), false),
            }
        }
        CH_DOCS_HASH_REQ => {
            let service = instance.service.lock().unwrap();
            let Some(docs) = service.docs.as_ref() else {
                return (ch_err(ServiceErrorCode::NoModelLoaded, "no docs provisioned"), false);
            };
            // Digest over the protected copy: an in-enclave access, so
            // host tampering with the doc pages is caught here.
            let region = instance.enclave.region_of("docs").expect("registered");
            match instance
                .enclave
                .read(&instance.token, region.offset, region.len as usize)
            {
                Ok(bytes) => {
                    let d = crate::crypto::digest(&bytes);
                    debug_assert_eq!(d, docs_digest(docs));
                    match instance.enclave.get_quote(&instance.token, *d.as_bytes()) {
                        Ok(quote) => {
                            let mut out = vec![CH_QUOTE];
                            out.extend_from_slice(&quote.encode());
                            (out, false)
                        }
                        Err(_) => crashed(ch_err(ServiceErrorCode::Crashed, "enclave crashed")),
                    }
                }
                Err(_) => crashed(ch_err(ServiceErrorCode::Crashed, "enclave crashed")),
            }
        }
        CH_RAG_LOOKUP => {
            let Some(key) = read_tokens(&mut r) else {
                return (ch_err(ServiceErrorCode::Protocol, "bad lookup"), false);
            };
            let service = instance.service.lock().unwrap();
            let Some(docs) = service.docs.as_ref() else {
                return (ch_err(ServiceErrorCode::NoModelLoaded, "no docs provisioned"), false);
            };
            // Touch the protected copy so tampering faults the enclave.
            let region = instance.enclave.region_of("docs").expect("registered");
            if instance
                .enclave
                .read(&instance.token, region.offset, region.len as usize)
                .is_err()
            {
                return crashed(ch_err(ServiceErrorCode::Crashed, "enclave crashed"));
            }
            let hit = docs.iter().find(|(k, _)| *k == key);
            let mut out = vec![CH_RAG_DOC];
            match hit {
                Some((_, doc)) => {
                    out.push(1);
                    write_tokens(&mut out, doc);
                }
                None => out.push(0),
            }
            (out, false)
        }
        other => (
            ch_err(ServiceErrorCode::Protocol, &format!("unknown request {other:#04x}")),
            false,
        ),
    }
}

fn handle_prompt(instance: &Arc<InstanceInfo>, r: &mut wire::Reader<'_>) -> (Vec<u8>, bool) {
    let beam_width = match r.u32() {
        Ok(b) => b,
        Err(_) => return (ch_err(ServiceErrorCode::Protocol, "bad prompt"), false),
    };
    let max_new_tokens = match r.u32() {
        Ok(m) => m,
        Err(_) => return (ch_err(ServiceErrorCode::Protocol, "bad prompt"), false),
    };
    let Some(prompt) = read_tokens(r) else {
        return (ch_err(ServiceErrorCode::Protocol, "bad prompt"), false);
    };

    let mut service = instance.service.lock().unwrap();
    let Some(model) = service.model.as_ref() else {
        return (ch_err(ServiceErrorCode::NoModelLoaded, "no model"), false);
    };

    // In-enclave read of the weights: integrity verified, crash on tamper.
    let weights = match model.load_weights(&instance.enclave, &instance.token) {
        Ok(w) => w,
        Err(e) => {
            let out = err_from_model(&e);
            let crash = out.get(1) == Some(&ServiceErrorCode::Crashed.code());
            return (out, crash);
        }
    };

    // Retrieval-augmented path: ask the RAG enclave over the attested
    // channel and prepend any hit to the context.
    let mut context = prompt.clone();
    if let Some(rag) = service.rag.as_mut() {
        match rag_lookup(rag, &prompt) {
            Ok(Some(doc)) => {
                let mut merged = doc.0;
                merged.extend_from_slice(&prompt.0);
                context = TokenSequence(merged);
            }
            Ok(None) => {}
            Err(e) => return (ch_err(ServiceErrorCode::RagAttestation, &e), false),
        }
    }

    let cfg = GenerationConfig {
        batch_size: 1,
        beam_width,
        max_new_tokens,
        input_length: context.len() as u32,
    };
    let generator = Generator::new(&weights);
    match generator.generate(std::slice::from_ref(&context), &cfg) {
        Ok(out) => {
            let mut resp = vec![CH_COMPLETION];
            write_tokens(&mut resp, &out.completions[0]);
            (resp, false)
        }
        Err(e) => (ch_err(ServiceErrorCode::Protocol, &e.to_string()), false),
    }
}

fn rag_lookup(rag: &mut RagSession, key: &TokenSequence) -> Result<Option<TokenSequence>, String> {
    let mut req = vec![CH_RAG_LOOKUP];
    write_tokens(&mut req, key);
    let frame = rag.channel.send(&req).map_err(|e| e.to_string())?;
    let mut msg = vec![MSG_FRAME];
    msg.extend_from_slice(&frame);
    rag.conn.send_msg(&msg).map_err(|e| e.to_string())?;
    let reply = rag.conn.recv_msg().map_err(|e| e.to_string())?;
    if reply.first() != Some(&MSG_FRAME) {
        return Err("rag service closed the channel".into());
    }
    let pt = rag.channel.recv(&reply[1..]).map_err(|e| e.to_string())?;
    let mut r = wire::Reader::new(&pt);
    match r.u8().map_err(|e| e.to_string())? {
        CH_RAG_DOC => match r.u8().map_err(|e| e.to_string())? {
            0 => Ok(None),
            1 => read_tokens(&mut r).map(Some).ok_or_else(|| "bad doc".into()),
            _ => Err("bad doc marker".into()),
        },
        CH_ERR => Err("rag service error".into()),
        _ => Err("unexpected rag reply".into()),
    }
}

/// The inference enclave attests the RAG enclave before trusting it:
/// local policy built from the RAG descriptor (measurement, TEE type,
/// platform root), checked during the channel handshake.
fn open_rag_session(
    instance: &Arc<InstanceInfo>,
    descriptor: &ServiceDescriptor,
) -> Result<RagSession, String> {
    let policy = ReferencePolicy::new(
        [descriptor.measurement],
        [descriptor.tee_type],
        [(descriptor.platform_id, descriptor.platform_root_public)],
    )
    .map_err(|e| e.to_string())?;
    let local_verifier = Verifier::new(policy, crate::crypto::SigningKeyPair::generate(&mut OsRng));

    let mut conn = instance
        .network
        .connect(&descriptor.address)
        .map_err(|e| e.to_string())?;
    let (hs, hello) = crate::channel::client_start(&mut OsRng);
    let mut msg = vec![MSG_CLIENT_HELLO];
    msg.extend_from_slice(&hello);
    conn.send_msg(&msg).map_err(|e| e.to_string())?;
    let reply = conn.recv_msg().map_err(|e| e.to_string())?;
    if reply.first() != Some(&MSG_SERVER_HELLO) {
        return Err("rag service refused handshake".into());
    }
    let channel = hs
        .finish(&reply[1..], crate::channel::ClientAuth::Policy(&local_verifier))
        .map_err(|e| match e {
            ChannelError::AttestationFailed(r) => format!("rag attestation failed: {r:?}"),
            other => other.to_string(),
        })?;
    Ok(RagSession { conn, channel })
}

pub(crate) fn read_tokens(r: &mut wire::Reader<'_>) -> Option<TokenSequence> {
    let n = r.u32().ok()? as usize;
    let mut tokens = Vec::with_capacity(n);
    for _ in 0..n {
        tokens.push(r.u32().ok()?);
    }
    Some(TokenSequence(tokens))
}

pub(crate) fn write_tokens(buf: &mut Vec<u8>, tokens: &TokenSequence) {
    wire::put_u32(buf, tokens.0.len() as u32);
    for t in &tokens.0 {
        wire::put_u32(buf, *t);
    }
}
