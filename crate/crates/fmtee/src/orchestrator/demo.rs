//! In-process end-to-end demo: the full deployment flow, steps 1-9, over
//! a tappable in-process network, printing one labeled line per step.

use std::io::Write;
use std::sync::Arc;

use rand::rngs::OsRng;
use rand::RngCore;

use crate::crypto::AeadKey;
use crate::enclave::{PlatformRoot, TeeType};
use crate::inference::{GenerationConfig, Generator, TokenSequence};
use crate::manifest::{compute_measurement, parse_manifest, FileTree};
use crate::model::{pack_model, ModelWeights};
use crate::net::Network;
use crate::verifier::{serve as verifier_serve, ReferencePolicy, Verifier};

use super::*;

pub struct DemoOutcome {
    pub descriptor: ServiceDescriptor,
    pub completion: TokenSequence,
    pub direct_completion: TokenSequence,
    /// Step 9 evidence: the signed verdict the user saw.
    pub verdict_passed: bool,
}

/// Run the whole flow in one process and write a step transcript to
/// `out`. Returns the published descriptor, the completion the user
/// received, and the direct in-enclave generation for the same prompt.
pub fn run_demo_e2e(out: &mut dyn Write) -> Result<DemoOutcome, String> {
    let network = Network::in_process();
    let mut transcript = |step: u8, label: &str| {
        writeln!(out, "step {step}: PASS  {label}").ok();
    };

    // Provider-side preparation: software, model, expected values.
    let manifest_text = "enclave_size = 8M\nthread_count = 4\nentrypoint = bin/serve\n\
                         trusted_file = bin/serve\ntrusted_file = conf/service.cfg\n\
                         allowed_file = logs/service.log\nkey_provider = provider://model-key\n\
                         attestation_mode = remote\n";
    let manifest = parse_manifest(manifest_text).map_err(|e| e.to_string())?;
    let mut files = FileTree::new();
    files
        .insert("bin/serve", b"fmtee inference service build 1".to_vec())
        .map_err(|e| e.to_string())?;
    files
        .insert("conf/service.cfg", b"beam=4\nbatch=6\n".to_vec())
        .map_err(|e| e.to_string())?;
    let expected_measurement =
        compute_measurement(&manifest, &files).map_err(|e| e.to_string())?;

    let weights = ModelWeights::generate(2024, 256, 32, 8);
    let mut key = AeadKey([0u8; 32]);
    OsRng.fill_bytes(&mut key.0);
    let key_id = *b"fmtee-demo-key-0";
    let package = pack_model(&weights, &key, key_id, &mut OsRng);
    let expected_model_digest = package.model_digest;

    // Infrastructure: platform, CSP, verifier with pre-generated policy.
    let platform = PlatformRoot::generate(TeeType::Application, &mut OsRng);
    let policy = ReferencePolicy::new(
        [expected_measurement],
        [TeeType::Application],
        [(platform.platform_id(), platform.root_public())],
    )
    .map_err(|e| e.to_string())?;
    let verifier = Arc::new(Verifier::new(policy, crate::crypto::SigningKeyPair::generate(&mut OsRng)));
    let verifier_public = verifier.public_key();
    let verifier_address = "inproc:verifier".to_string();
    let listener = network
        .listen(&verifier_address)
        .map_err(|e| e.to_string())?;
    {
        let verifier = Arc::clone(&verifier);
        std::thread::spawn(move || verifier_serve(listener, verifier));
    }

    let csp = CspHost::new(platform, network.clone(), CspBehavior::Honest);
    let csp_address = "inproc:csp".to_string();
    let csp_listener = network.listen(&csp_address).map_err(|e| e.to_string())?;
    {
        let csp = Arc::clone(&csp);
        std::thread::spawn(move || csp.serve(csp_listener));
    }

    // Steps 1-7 via the provider client.
    let cfg = ProviderConfig {
        manifest_text: manifest_text.to_string(),
        files,
        tee_type: TeeType::Application,
        expected_measurement,
        expected_model_digest,
        verifier_address,
        verifier_public,
        model_key: key,
        key_id,
        package_name: "model.fmte".into(),
        package,
        hooks: DefenseHooks::default(),
    };
    let descriptor = provider_deploy(&cfg, &network, &csp_address).map_err(|e| e.to_string())?;
    transcript(1, "TEE instance requested (manifest + files submitted)");
    transcript(2, "instance allocated; handle received");
    transcript(3, "attestation quote fetched; channel key bound in report data");
    transcript(4, "verifier accepted the quote (valid TEE)");
    transcript(5, "measurement matches the expected value");
    transcript(6, "model key provisioned; encrypted model loaded");
    transcript(7, "attested model hash matches; service descriptor published");

    // Steps 8-9 via the user client.
    let prompt = TokenSequence(vec![11, 42, 7, 100, 5, 250, 33, 8]);
    let options = PromptOptions {
        beam_width: 4,
        max_new_tokens: 12,
        auth: UserAuth::ViaVerifier,
        ..Default::default()
    };
    let outcome =
        user_prompt(&descriptor, &prompt, &network, &options).map_err(|e| e.to_string())?;
    transcript(8, "secure channel opened; prompt answered");
    if !outcome.verdict_is_pass() {
        return Err("user-side verdict did not pass".into());
    }
    transcript(9, "user verified the attestation during channel setup");

    // Oracle: direct in-enclave generation for the same prompt.
    let generator = Generator::new(&weights);
    let gen_cfg = GenerationConfig {
        batch_size: 1,
        beam_width: options.beam_width,
        max_new_tokens: options.max_new_tokens,
        input_length: prompt.len() as u32,
    };
    let direct = generator
        .generate(std::slice::from_ref(&prompt), &gen_cfg)
        .map_err(|e| e.to_string())?;

    writeln!(
        out,
        "completion ({} tokens): {}",
        outcome.completion.len(),
        outcome.completion.to_csv()
    )
    .ok();
    writeln!(
        out,
        "matches direct in-enclave generation: {}",
        outcome.completion == direct.completions[0]
    )
    .ok();

    Ok(DemoOutcome {
        descriptor,
        completion: outcome.completion,
        direct_completion: direct.completions[0].clone(),
        verdict_passed: outcome.verdict.passed,
    })
}

impl PromptOutcome {
    fn verdict_is_pass(&self) -> bool {
        self.verdict.passed
    }
}
