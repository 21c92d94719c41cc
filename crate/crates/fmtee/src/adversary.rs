//! Executable threat scenarios run against a live deployment, each
//! asserting the specific defense outcome the flow promises:
//!
//! * `EavesdropNetwork` — tap every link for a full session; no plaintext
//!   prompt bytes and no 16-byte window of the weights may appear.
//! * `EavesdropMemory` — host reads of weight pages never return the
//!   plaintext.
//! * `TamperMemory` — one host bit-flip in a weight page; the next user
//!   session must end with a crash notice and a closed connection.
//! * `TamperPackage` — one bit-flip in the `.fmte` bytes; the load must
//!   fail authenticated decryption.
//! * `CspSwapModel` — the CSP serves a package built from another seed;
//!   the provider flow must abort on the model hash comparison.
//! * `CspSwapSoftware` — the CSP launches a modified trusted file; the
//!   flow must abort on the measurement comparison.
//!
//! Attacks act only through host-level powers (taps, host reads/writes,
//! CSP behavior); none of them ever touches an enclave owner token. Each
//! scenario runs against a freshly built deployment fixture, and every
//! scenario has a defense-disabling negative control proving the check
//! detects real leaks rather than passing vacuously.

use std::collections::HashSet;
use std::sync::Arc;

use rand::rngs::StdRng;
use rand::{Rng, RngCore, SeedableRng};
use serde::Serialize;
use thiserror::Error;

use crate::crypto::AeadKey;
use crate::enclave::{PlatformRoot, TeeType};
use crate::inference::TokenSequence;
use crate::manifest::{compute_measurement, parse_manifest, FileTree};
use crate::model::{pack_model, ModelWeights};
use crate::net::{contains_window, Network, TapLog};
use crate::orchestrator::{
    provider_deploy, user_prompt, AbortReason, CspBehavior, CspHost, Defense, DefenseHooks,
    PromptOptions, ProviderConfig, ServiceErrorCode, UserAuth, UserError,
};
use crate::verifier::{serve as verifier_serve, ReferencePolicy, Verifier};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("deployment fixture unhealthy: {0}")]
    FixtureUnhealthy(String),
}

/// The three threat surfaces as six concrete, parameterized scenarios.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttackScenario {
    EavesdropNetwork,
    EavesdropMemory { trials: u32 },
    /// `bit_offset`: bit position within the protected model region;
    /// `None` draws one at random.
    TamperMemory { bit_offset: Option<u64> },
    /// `bit_offset`: bit position within the package ciphertext body.
    TamperPackage { bit_offset: Option<u64> },
    CspSwapModel,
    CspSwapSoftware,
}

impl AttackScenario {
    pub fn kind_name(&self) -> &'static str {
        match self {
            AttackScenario::EavesdropNetwork => "EAVESDROP_NETWORK",
            AttackScenario::EavesdropMemory { .. } => "EAVESDROP_MEMORY",
            AttackScenario::TamperMemory { .. } => "TAMPER_MEMORY",
            AttackScenario::TamperPackage { .. } => "TAMPER_PACKAGE",
            AttackScenario::CspSwapModel => "CSP_SWAP_MODEL",
            AttackScenario::CspSwapSoftware => "CSP_SWAP_SOFTWARE",
        }
    }

    /// All six kinds with default parameters.
    pub fn all_default() -> Vec<AttackScenario> {
        vec![
            AttackScenario::EavesdropNetwork,
            AttackScenario::EavesdropMemory { trials: 1000 },
            AttackScenario::TamperMemory { bit_offset: None },
            AttackScenario::TamperPackage { bit_offset: None },
            AttackScenario::CspSwapModel,
            AttackScenario::CspSwapSoftware,
        ]
    }

    pub fn parse(name: &str) -> Option<AttackScenario> {
        match name {
            "eavesdrop-network" => Some(AttackScenario::EavesdropNetwork),
            "eavesdrop-memory" => Some(AttackScenario::EavesdropMemory { trials: 1000 }),
            "tamper-memory" => Some(AttackScenario::TamperMemory { bit_offset: None }),
            "tamper-package" => Some(AttackScenario::TamperPackage { bit_offset: None }),
            "csp-swap-model" => Some(AttackScenario::CspSwapModel),
            "csp-swap-software" => Some(AttackScenario::CspSwapSoftware),
            _ => None,
        }
    }

    /// The defense whose test hook forms this scenario's negative control.
    pub fn defense(&self) -> Defense {
        match self {
            AttackScenario::EavesdropNetwork => Defense::ChannelEncryption,
            AttackScenario::EavesdropMemory { .. } => Defense::MemoryGarbling,
            AttackScenario::TamperMemory { .. } => Defense::IntegrityChecks,
            AttackScenario::TamperPackage { .. } => Defense::PackageAuth,
            AttackScenario::CspSwapModel => Defense::ModelHashCheck,
            AttackScenario::CspSwapSoftware => Defense::MeasurementCheck,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackReport {
    pub scenario: String,
    pub blocked: bool,
    pub evidence: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub reports: Vec<AttackReport>,
    pub all_blocked: bool,
}

/// One freshly wired deployment: platform, verifier service, CSP host
/// (with per-scenario behavior), and the provider's prepared config.
pub struct DeploymentFixture {
    pub network: Network,
    pub csp: Arc<CspHost>,
    pub csp_address: String,
    pub csp_tap: Arc<TapLog>,
    pub provider_cfg: ProviderConfig,
    pub weights: ModelWeights,
    pub prompt: TokenSequence,
    pub swap_package_name: String,
}

const MODEL_SEED: u64 = 777;
const SWAP_SEED: u64 = 778;
const VOCAB: u32 = 256;
const EMBED: u32 = 32;
const WINDOW: u32 = 8;

impl DeploymentFixture {
    /// Stand up the full topology in-process. `hooks` flow to every
    /// component so negative controls disable a defense end to end.
    pub fn build(behavior: CspBehavior, hooks: DefenseHooks) -> Result<Self, AttackError> {
        let unhealthy = |e: String| AttackError::FixtureUnhealthy(e);
        let mut rng = StdRng::seed_from_u64(0xfee1);
        let network = Network::in_process();

        let manifest_text = "enclave_size = 8M\nthread_count = 2\nentrypoint = bin/serve\n\
                             trusted_file = bin/serve\nattestation_mode = remote\n";
        let manifest = parse_manifest(manifest_text).map_err(|e| unhealthy(e.to_string()))?;
        let mut files = FileTree::new();
        files
            .insert("bin/serve", b"fmtee inference service".to_vec())
            .map_err(|e| unhealthy(e.to_string()))?;
        let expected_measurement =
            compute_measurement(&manifest, &files).map_err(|e| unhealthy(e.to_string()))?;

        let weights = ModelWeights::generate(MODEL_SEED, VOCAB, EMBED, WINDOW);
        let mut key = AeadKey([0u8; 32]);
        rng.fill_bytes(&mut key.0);
        let key_id = *b"fmtee-fixture-k0";
        let package = pack_model(&weights, &key, key_id, &mut rng);

        let platform = PlatformRoot::generate(TeeType::Application, &mut rng);
        let policy = ReferencePolicy::new(
            [expected_measurement],
            [TeeType::Application],
            [(platform.platform_id(), platform.root_public())],
        )
        .map_err(|e| unhealthy(e.to_string()))?;
        let verifier = Arc::new(Verifier::new(
            policy,
            crate::crypto::SigningKeyPair::generate(&mut rng),
        ));
        let verifier_public = verifier.public_key();
        let verifier_address = network.ephemeral_addr("verifier");
        let vlistener = network
            .listen(&verifier_address)
            .map_err(|e| unhealthy(e.to_string()))?;
        std::thread::spawn(move || verifier_serve(vlistener, verifier));

        let csp = CspHost::with_hooks(platform, network.clone(), behavior, hooks);
        let csp_address = network.ephemeral_addr("csp");
        let csp_tap = TapLog::new();
        let csp_listener = network
            .listen_tapped(&csp_address, Some(Arc::clone(&csp_tap)))
            .map_err(|e| unhealthy(e.to_string()))?;
        let csp_address = csp_listener.local_addr();
        {
            let csp = Arc::clone(&csp);
            std::thread::spawn(move || csp.serve(csp_listener));
        }

        // The package a dishonest CSP swaps in: a different seed sealed
        // under the same provisioned key (for example a stale release).
        let swap_weights = ModelWeights::generate(SWAP_SEED, VOCAB, EMBED, WINDOW);
        let swap_package = pack_model(&swap_weights, &key, key_id, &mut rng);
        let swap_package_name = "swap.fmte".to_string();
        csp.put_package(&swap_package_name, swap_package.encode());

        let provider_cfg = ProviderConfig {
            manifest_text: manifest_text.to_string(),
            files,
            tee_type: TeeType::Application,
            expected_measurement,
            expected_model_digest: package.model_digest,
            verifier_address,
            verifier_public,
            model_key: key,
            key_id,
            package_name: "model.fmte".into(),
            package,
            hooks,
        };

        Ok(DeploymentFixture {
            network,
            csp,
            csp_address,
            csp_tap,
            provider_cfg,
            weights,
            prompt: TokenSequence(vec![3, 1, 4, 1, 5, 9, 2, 6]),
            swap_package_name,
        })
    }

    fn prompt_options(&self) -> PromptOptions {
        PromptOptions {
            beam_width: 1,
            max_new_tokens: 8,
            auth: UserAuth::ViaVerifier,
            hooks: self.provider_cfg.hooks,
        }
    }
}

/// Run one scenario against a freshly built fixture.
pub fn run_attack(
    scenario: &AttackScenario,
    hooks: DefenseHooks,
) -> Result<AttackReport, AttackError> {
    let behavior = match scenario {
        AttackScenario::CspSwapModel => CspBehavior::SwapModel {
            replacement: "swap.fmte".into(),
        },
        AttackScenario::CspSwapSoftware => CspBehavior::SwapSoftware,
        _ => CspBehavior::Honest,
    };
    let fixture = DeploymentFixture::build(behavior, hooks)?;

    let report = match scenario {
        AttackScenario::EavesdropNetwork => eavesdrop_network(&fixture)?,
        AttackScenario::EavesdropMemory { trials } => eavesdrop_memory(&fixture, *trials)?,
        AttackScenario::TamperMemory { bit_offset } => tamper_memory(&fixture, *bit_offset)?,
        AttackScenario::TamperPackage { bit_offset } => tamper_package(fixture, *bit_offset)?,
        AttackScenario::CspSwapModel => csp_swap_model(&fixture)?,
        AttackScenario::CspSwapSoftware => csp_swap_software(&fixture)?,
    };
    Ok(report)
}

/// Every scenario once, default parameters, against honest defenses.
pub fn run_all() -> Result<SuiteReport, AttackError> {
    let mut reports = Vec::new();
    for scenario in AttackScenario::all_default() {
        reports.push(run_attack(&scenario, DefenseHooks::default())?);
    }
    let all_blocked = reports.iter().all(|r| r.blocked);
    Ok(SuiteReport {
        reports,
        all_blocked,
    })
}

fn deploy_or_unhealthy(
    fixture: &DeploymentFixture,
) -> Result<crate::orchestrator::ServiceDescriptor, AttackError> {
    provider_deploy(&fixture.provider_cfg, &fixture.network, &fixture.csp_address)
        .map_err(|e| AttackError::FixtureUnhealthy(e.to_string()))
}

/// Collect all tap bytes (CSP link plus every instance link).
fn all_tap_bytes(fixture: &DeploymentFixture) -> Vec<u8> {
    let mut bytes = fixture.csp_tap.all_bytes();
    for instance in fixture.csp.instances() {
        bytes.extend_from_slice(&instance.tap.all_bytes());
    }
    bytes
}

fn count_leaked_windows(haystack: &[u8], secret: &[u8]) -> usize {
    if haystack.len() < 16 || secret.len() < 16 {
        return 0;
    }
    let tap_windows: HashSet<&[u8]> = haystack.windows(16).collect();
    secret
        .windows(16)
        .filter(|w| tap_windows.contains(*w))
        .count()
}

fn eavesdrop_network(fixture: &DeploymentFixture) -> Result<AttackReport, AttackError> {
    let descriptor = deploy_or_unhealthy(fixture)?;
    let outcome = user_prompt(
        &descriptor,
        &fixture.prompt,
        &fixture.network,
        &fixture.prompt_options(),
    )
    .map_err(|e| AttackError::FixtureUnhealthy(e.to_string()))?;

    let wire = all_tap_bytes(fixture);
    let weight_hits = count_leaked_windows(&wire, &fixture.weights.serialize());
    let prompt_bytes = fixture.prompt.to_bytes();
    let completion_bytes = outcome.completion.to_bytes();
    let prompt_hits = count_leaked_windows(&wire, &prompt_bytes)
        + usize::from(contains_window(&wire, &prompt_bytes));
    let completion_hits = usize::from(contains_window(&wire, &completion_bytes));

    let blocked = weight_hits == 0 && prompt_hits == 0 && completion_hits == 0;
    Ok(AttackReport {
        scenario: "EAVESDROP_NETWORK".into(),
        blocked,
        evidence: vec![
            format!("tap bytes scanned: {}", wire.len()),
            format!("16-byte weight windows found: {weight_hits}"),
            format!("plaintext prompt encodings found: {prompt_hits}"),
            format!("plaintext completion encodings found: {completion_hits}"),
        ],
    })
}

fn eavesdrop_memory(fixture: &DeploymentFixture, trials: u32) -> Result<AttackReport, AttackError> {
    deploy_or_unhealthy(fixture)?;
    let instance = fixture
        .csp
        .instances()
        .into_iter()
        .next()
        .ok_or_else(|| AttackError::FixtureUnhealthy("no instance".into()))?;
    let region = instance
        .enclave
        .region_of("model")
        .ok_or_else(|| AttackError::FixtureUnhealthy("model region missing".into()))?;
    let plaintext = fixture.weights.serialize();

    let mut rng = StdRng::seed_from_u64(0x5eed);
    let mut exposures = 0usize;
    for _ in 0..trials {
        let len = rng.gen_range(16..=256usize.min(plaintext.len()));
        let within = rng.gen_range(0..=(region.len as usize).saturating_sub(len)) as u64;
        let host_view = instance.enclave.host_read(region.offset + within, len);
        let truth = &plaintext[within as usize..within as usize + len];
        if host_view == truth {
            exposures += 1;
        }
    }

    Ok(AttackReport {
        scenario: "EAVESDROP_MEMORY".into(),
        blocked: exposures == 0,
        evidence: vec![
            format!("host reads attempted: {trials}"),
            format!("reads matching plaintext: {exposures}"),
        ],
    })
}

fn tamper_memory(
    fixture: &DeploymentFixture,
    bit_offset: Option<u64>,
) -> Result<AttackReport, AttackError> {
    let descriptor = deploy_or_unhealthy(fixture)?;
    let options = fixture.prompt_options();

    // A healthy session first.
    user_prompt(&descriptor, &fixture.prompt, &fixture.network, &options)
        .map_err(|e| AttackError::FixtureUnhealthy(format!("pre-attack session failed: {e}")))?;

    let instance = fixture
        .csp
        .instances()
        .into_iter()
        .next()
        .ok_or_else(|| AttackError::FixtureUnhealthy("no instance".into()))?;
    let region = instance
        .enclave
        .region_of("model")
        .ok_or_else(|| AttackError::FixtureUnhealthy("model region missing".into()))?;

    // Flip one bit inside the tensor area (offset 32 of the serialized
    // form onward) through the host view: guaranteed plaintext corruption
    // that still parses if integrity checking is disabled.
    let tensor_bits_start = 32 * 8;
    let tensor_bits = (region.len * 8).saturating_sub(tensor_bits_start);
    let bit = tensor_bits_start
        + bit_offset.unwrap_or_else(|| StdRng::seed_from_u64(0x7a3).gen_range(0..tensor_bits))
            % tensor_bits;
    let byte_offset = region.offset + bit / 8;
    let view = instance.enclave.host_read(byte_offset, 1);
    instance
        .enclave
        .host_write(byte_offset, &[view[0] ^ (1 << (bit % 8))]);

    // The next session must end with a crash notice and a closed
    // connection.
    let result = user_prompt(&descriptor, &fixture.prompt, &fixture.network, &options);
    let crashed_observed = matches!(result, Err(UserError::ServiceCrashed));
    let enclave_crashed = instance.enclave.is_crashed();

    Ok(AttackReport {
        scenario: "TAMPER_MEMORY".into(),
        blocked: crashed_observed && enclave_crashed,
        evidence: vec![
            format!("bit flipped at protected offset {byte_offset}, bit {}", bit % 8),
            format!("session outcome: {:?}", result.map(|o| o.completion.to_csv())),
            format!("enclave crashed: {enclave_crashed}"),
        ],
    })
}

fn tamper_package(
    mut fixture: DeploymentFixture,
    bit_offset: Option<u64>,
) -> Result<AttackReport, AttackError> {
    // Flip one ciphertext bit in the .fmte the provider ships, inside the
    // tensor area so an unauthenticated load would still deserialize.
    let ct_len = fixture.provider_cfg.package.ciphertext.len() as u64;
    let tensor_bits_start = 32 * 8;
    let usable_bits = (ct_len - crate::crypto::AEAD_TAG_LEN as u64) * 8 - tensor_bits_start;
    let bit = tensor_bits_start
        + bit_offset.unwrap_or_else(|| StdRng::seed_from_u64(0x9b1).gen_range(0..usable_bits))
            % usable_bits;
    fixture.provider_cfg.package.ciphertext[(bit / 8) as usize] ^= 1 << (bit % 8);

    let result = provider_deploy(
        &fixture.provider_cfg,
        &fixture.network,
        &fixture.csp_address,
    );
    let (blocked, outcome) = match &result {
        Err(e) if e.step() == 6 => (
            matches!(
                e.reason(),
                AbortReason::ModelLoad(ServiceErrorCode::DecryptFail)
            ),
            format!("{e}"),
        ),
        Err(e) => (false, format!("{e}")),
        Ok(_) => (false, "deployment completed despite tampered package".into()),
    };

    Ok(AttackReport {
        scenario: "TAMPER_PACKAGE".into(),
        blocked,
        evidence: vec![
            format!("ciphertext bit flipped: {bit}"),
            format!("outcome: {outcome}"),
        ],
    })
}

fn csp_swap_model(fixture: &DeploymentFixture) -> Result<AttackReport, AttackError> {
    let result = provider_deploy(
        &fixture.provider_cfg,
        &fixture.network,
        &fixture.csp_address,
    );
    let (blocked, outcome) = match &result {
        Err(e) if e.step() == 7 && *e.reason() == AbortReason::ModelDigestMismatch => {
            (true, format!("{e}"))
        }
        Err(e) => (false, format!("{e}")),
        Ok(_) => (false, "deployment completed despite swapped model".into()),
    };
    Ok(AttackReport {
        scenario: "CSP_SWAP_MODEL".into(),
        blocked,
        evidence: vec![format!("outcome: {outcome}")],
    })
}

fn csp_swap_software(fixture: &DeploymentFixture) -> Result<AttackReport, AttackError> {
    let result = provider_deploy(
        &fixture.provider_cfg,
        &fixture.network,
        &fixture.csp_address,
    );
    let (blocked, outcome) = match &result {
        Err(e) if e.step() == 5 && *e.reason() == AbortReason::MeasurementMismatch => {
            (true, format!("{e}"))
        }
        Err(e) => (false, format!("{e}")),
        Ok(_) => (false, "deployment completed despite swapped software".into()),
    };
    Ok(AttackReport {
        scenario: "CSP_SWAP_SOFTWARE".into(),
        blocked,
        evidence: vec![format!("outcome: {outcome}")],
    })
}
