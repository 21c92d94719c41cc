//! Benchmark harness: per-token timing capture, Z-score outlier
//! filtering, throughput/latency distributions, and pairwise overhead
//! comparison, runnable against bare generation and enclave-hosted
//! generation.
//!
//! Conventions pinned here so results are reproducible:
//!
//! * At least `min_tokens` samples are collected, one per generated token
//!   position per batch step (a sample covers the whole batch step).
//! * Outliers are removed in a single pass over the raw set with
//!   population standard deviation: samples with `|x - mean| / stddev >
//!   3` go, and a zero-deviation set removes nothing. Z-scores pool all
//!   runs of one (target, config) measurement.
//! * Per-token throughput samples are `batch_size / duration` (total) and
//!   `1 / duration` (per stream).
//! * Overhead uses means: throughput `(base - secured) / base * 100`,
//!   latency `(secured - base) / base * 100`.
//! * Percentiles are nearest-rank over the sorted samples.
//! * The clock is the monotonic wall clock (`std::time::Instant`).

use std::io::{BufRead, Write};
use std::sync::Arc;
use std::time::Duration;

use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enclave::{Enclave, OwnerToken, PlatformRoot, TeeType};
use crate::inference::{EnclaveTax, GenerationConfig, Generator, InferenceError, TokenSequence};
use crate::model::{EnclaveModel, ModelWeights};

pub const REPORT_FORMAT: &str = "fmtee-bench";
pub const REPORT_VERSION: u32 = 1;
const CLOCK_NOTE: &str = "monotonic wall clock (std::time::Instant), nanosecond granularity";
/// Mean next-token latency below the average human reading speed of one
/// word per 200 ms reads as interactive.
const HUMAN_READING_SPEED_SECS: f64 = 0.2;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("need at least 2 samples to filter outliers")]
    TooFewSamples,
    #[error("empty input")]
    EmptyInput,
    #[error("reports have different configurations")]
    ConfigMismatch,
    #[error("generation target failed: {0}")]
    TargetFailed(String),
    #[error("bad report file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One wall-clock timing for one generated token position of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenTimingSample {
    pub token_index: u32,
    pub duration_secs: f64,
    pub run_id: u32,
}

/// Something that can execute one generation run and hand back per-token
/// step timings. `run_id` seeds the prompts, so distinct targets measure
/// identical workloads.
pub trait GenerationTarget {
    fn label(&self) -> String;
    fn run(&mut self, cfg: &GenerationConfig, run_id: u32) -> Result<Vec<Duration>, BenchError>;
}

fn prompts_for_run(
    vocab_size: u32,
    cfg: &GenerationConfig,
    prompt_seed: u64,
    run_id: u32,
) -> Vec<TokenSequence> {
    let mut rng = StdRng::seed_from_u64(prompt_seed ^ ((run_id as u64) << 32));
    (0..cfg.batch_size)
        .map(|_| TokenSequence::random(&mut rng, vocab_size, cfg.input_length as usize))
        .collect()
}

/// Direct generation over in-memory weights.
pub struct BareTarget {
    weights: ModelWeights,
    prompt_seed: u64,
}

impl BareTarget {
    pub fn new(weights: ModelWeights, prompt_seed: u64) -> Self {
        BareTarget {
            weights,
            prompt_seed,
        }
    }
}

impl GenerationTarget for BareTarget {
    fn label(&self) -> String {
        "bare".into()
    }

    fn run(&mut self, cfg: &GenerationConfig, run_id: u32) -> Result<Vec<Duration>, BenchError> {
        let prompts = prompts_for_run(self.weights.vocab_size, cfg, self.prompt_seed, run_id);
        let out = Generator::new(&self.weights)
            .generate(&prompts, cfg)
            .map_err(|e: InferenceError| BenchError::TargetFailed(e.to_string()))?;
        Ok(out.step_timings)
    }
}

/// Generation served from a simulated enclave: every run re-reads the
/// protected model pages (integrity-checked access, so tampering crashes
/// the run) and the synthetic per-access enclave tax applies during the
/// timed steps. The deserialized weights are cached at provision time so
/// the compute baseline matches `BareTarget` exactly and the measured
/// difference is the tax alone.
pub struct EnclaveTarget {
    enclave: Arc<Enclave>,
    token: OwnerToken,
    model: EnclaveModel,
    cached_weights: ModelWeights,
    tax: EnclaveTax,
    prompt_seed: u64,
}

impl EnclaveTarget {
    /// Stand up a platform, launch an enclave, provision the key, and
    /// load the model, all in-process.
    pub fn provision(
        weights: &ModelWeights,
        tax: EnclaveTax,
        prompt_seed: u64,
    ) -> Result<Self, BenchError> {
        use crate::crypto::AeadKey;
        use crate::manifest::{parse_manifest, FileTree};
        use crate::model::{pack_model, unpack_model_in_enclave};
        use rand::RngCore;

        let mut rng = StdRng::seed_from_u64(prompt_seed ^ 0xb43c);
        let platform = PlatformRoot::generate(TeeType::Application, &mut rng);
        let manifest = parse_manifest(
            "enclave_size = 64M\nthread_count = 1\nentrypoint = app\ntrusted_file = app\n",
        )
        .map_err(|e| BenchError::TargetFailed(e.to_string()))?;
        let mut tree = FileTree::new();
        tree.insert("app", b"bench service".to_vec())
            .map_err(|e| BenchError::TargetFailed(e.to_string()))?;
        let (enclave, token) = platform
            .launch(&manifest, &tree, &mut rng)
            .map_err(|e| BenchError::TargetFailed(e.to_string()))?;

        let mut key = AeadKey([0u8; 32]);
        rng.fill_bytes(&mut key.0);
        let key_id = *b"fmtee-bench-key0";
        enclave
            .seal(&token, key_id, &key.0, &mut rng)
            .map_err(|e| BenchError::TargetFailed(e.to_string()))?;
        let pkg = pack_model(weights, &key, key_id, &mut rng);
        let model = unpack_model_in_enclave(&enclave, &token, &pkg, key_id)
            .map_err(|e| BenchError::TargetFailed(e.to_string()))?;
        let cached_weights = model
            .load_weights(&enclave, &token)
            .map_err(|e| BenchError::TargetFailed(e.to_string()))?;

        Ok(EnclaveTarget {
            enclave: Arc::new(enclave),
            token,
            model,
            cached_weights,
            tax,
            prompt_seed,
        })
    }
}

impl GenerationTarget for EnclaveTarget {
    fn label(&self) -> String {
        format!("enclave(tax={}ns/access)", self.tax.delay_per_access_ns)
    }

    fn run(&mut self, cfg: &GenerationConfig, run_id: u32) -> Result<Vec<Duration>, BenchError> {
        // In-enclave integrity touch of the model pages before serving.
        self.model
            .digest_in_enclave(&self.enclave, &self.token)
            .map_err(|e| BenchError::TargetFailed(e.to_string()))?;
        let prompts =
            prompts_for_run(self.cached_weights.vocab_size, cfg, self.prompt_seed, run_id);
        let out = Generator::with_tax(&self.cached_weights, self.tax)
            .generate(&prompts, cfg)
            .map_err(|e| BenchError::TargetFailed(e.to_string()))?;
        Ok(out.step_timings)
    }
}

/// Table reads per steady-state batch step (every beam populated and the
/// context at least as long as the scoring window). Used to calibrate the
/// per-access tax against a measured per-step time.
pub fn steady_state_accesses(cfg: &GenerationConfig, vocab_size: u32, context_window: u32) -> u64 {
    cfg.batch_size as u64 * cfg.beam_width as u64 * vocab_size as u64 * context_window as u64
}

/// Collect at least `min_tokens` per-token samples, running the target as
/// many times as needed. A failing run discards its partial samples.
pub fn measure(
    target: &mut dyn GenerationTarget,
    cfg: &GenerationConfig,
    min_tokens: usize,
) -> Result<Vec<TokenTimingSample>, BenchError> {
    cfg.validate()
        .map_err(|e| BenchError::TargetFailed(e.to_string()))?;
    let mut samples = Vec::with_capacity(min_tokens + cfg.max_new_tokens as usize);
    let mut run_id = 0u32;
    while samples.len() < min_tokens {
        let timings = target.run(cfg, run_id)?;
        samples.extend(timings.iter().enumerate().map(|(i, d)| TokenTimingSample {
            token_index: i as u32,
            duration_secs: d.as_secs_f64(),
            run_id,
        }));
        run_id += 1;
    }
    Ok(samples)
}

/// Collect at least `min_tokens` samples from each of two targets with
/// their runs interleaved, so slow environment drift (frequency scaling,
/// cache warm-up, noisy neighbors) hits both sides equally. This is the
/// measurement mode `compare` expects its inputs to come from.
pub fn measure_paired(
    a: &mut dyn GenerationTarget,
    b: &mut dyn GenerationTarget,
    cfg: &GenerationConfig,
    min_tokens: usize,
) -> Result<(Vec<TokenTimingSample>, Vec<TokenTimingSample>), BenchError> {
    cfg.validate()
        .map_err(|e| BenchError::TargetFailed(e.to_string()))?;
    let mut samples_a = Vec::new();
    let mut samples_b = Vec::new();
    let mut run_id = 0u32;
    let collect = |samples: &mut Vec<TokenTimingSample>,
                   timings: Vec<Duration>,
                   run_id: u32| {
        samples.extend(timings.iter().enumerate().map(|(i, d)| TokenTimingSample {
            token_index: i as u32,
            duration_secs: d.as_secs_f64(),
            run_id,
        }));
    };
    while samples_a.len() < min_tokens || samples_b.len() < min_tokens {
        collect(&mut samples_a, a.run(cfg, run_id)?, run_id);
        collect(&mut samples_b, b.run(cfg, run_id)?, run_id);
        run_id += 1;
    }
    Ok((samples_a, samples_b))
}

/// Run the target once and discard the timings, paying first-touch costs
/// (page faults, caches, frequency ramp) outside the measurement.
pub fn warm_up(
    target: &mut dyn GenerationTarget,
    cfg: &GenerationConfig,
) -> Result<(), BenchError> {
    target.run(cfg, u32::MAX)?;
    Ok(())
}

/// Outlier-filtered samples plus the bookkeeping the report echoes.
#[derive(Debug, Clone)]
pub struct FilteredSamples {
    pub samples: Vec<TokenTimingSample>,
    pub raw_count: usize,
    pub removed_fraction: f64,
}

/// Single-pass |Z| > 3 filter with population standard deviation over the
/// raw set. Applying it twice may remove more; only the single pass is
/// normative.
pub fn filter_outliers(samples: &[TokenTimingSample]) -> Result<FilteredSamples, BenchError> {
    if samples.len() < 2 {
        return Err(BenchError::TooFewSamples);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.duration_secs).sum::<f64>() / n;
    let variance = samples
        .iter()
        .map(|s| (s.duration_secs - mean).powi(2))
        .sum::<f64>()
        / n;
    let stddev = variance.sqrt();

    let kept: Vec<TokenTimingSample> = if stddev == 0.0 {
        samples.to_vec()
    } else {
        samples
            .iter()
            .copied()
            .filter(|s| ((s.duration_secs - mean) / stddev).abs() <= 3.0)
            .collect()
    };
    let removed_fraction = (samples.len() - kept.len()) as f64 / n;
    Ok(FilteredSamples {
        samples: kept,
        raw_count: samples.len(),
        removed_fraction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistSummary {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
}

fn summarize_values(values: &[f64]) -> DistSummary {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("durations are finite"));
    let n = sorted.len();
    // Nearest-rank percentile: the smallest value with at least q% of the
    // mass at or below it.
    let rank = |q: f64| -> f64 {
        let idx = ((q / 100.0 * n as f64).ceil() as usize).clamp(1, n);
        sorted[idx - 1]
    };
    DistSummary {
        mean: sorted.iter().sum::<f64>() / n as f64,
        p50: rank(50.0),
        p95: rank(95.0),
        p99: rank(99.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: GenerationConfig,
    pub environment: String,
    pub raw_sample_count: usize,
    pub filtered_sample_count: usize,
    pub removed_outlier_fraction: f64,
    /// Per-token latency (seconds per batch step).
    pub latency: DistSummary,
    /// Tokens per second across the whole batch (`batch_size / duration`).
    pub tokens_per_second_total: DistSummary,
    /// Tokens per second of a single stream (`1 / duration`).
    pub tokens_per_second_per_stream: DistSummary,
    pub below_human_reading_speed: bool,
    pub clock: String,
}

/// Turn filtered samples into the report: throughput per sample is the
/// inverse of its token generation time.
pub fn summarize(
    filtered: &FilteredSamples,
    cfg: &GenerationConfig,
    environment: &str,
) -> Result<BenchmarkReport, BenchError> {
    if filtered.samples.is_empty() {
        return Err(BenchError::EmptyInput);
    }
    let durations: Vec<f64> = filtered.samples.iter().map(|s| s.duration_secs).collect();
    let total: Vec<f64> = durations
        .iter()
        .map(|d| cfg.batch_size as f64 / d)
        .collect();
    let per_stream: Vec<f64> = durations.iter().map(|d| 1.0 / d).collect();
    let latency = summarize_values(&durations);
    Ok(BenchmarkReport {
        config: *cfg,
        environment: environment.to_string(),
        raw_sample_count: filtered.raw_count,
        filtered_sample_count: filtered.samples.len(),
        removed_outlier_fraction: filtered.removed_fraction,
        below_human_reading_speed: latency.mean < HUMAN_READING_SPEED_SECS,
        latency,
        tokens_per_second_total: summarize_values(&total),
        tokens_per_second_per_stream: summarize_values(&per_stream),
        clock: CLOCK_NOTE.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub config: GenerationConfig,
    pub baseline_environment: String,
    pub secured_environment: String,
    /// `(baseline - secured) / baseline * 100` over mean total throughput.
    pub throughput_overhead_pct: f64,
    /// `(secured - baseline) / baseline * 100` over mean latency.
    pub latency_overhead_pct: f64,
    pub throughput_formula: String,
    pub latency_formula: String,
}

/// Pairwise overhead between a baseline and a secured run of the same
/// configuration.
pub fn compare(
    baseline: &BenchmarkReport,
    secured: &BenchmarkReport,
) -> Result<OverheadReport, BenchError> {
    if baseline.config != secured.config {
        return Err(BenchError::ConfigMismatch);
    }
    let thr_b = baseline.tokens_per_second_total.mean;
    let thr_s = secured.tokens_per_second_total.mean;
    let lat_b = baseline.latency.mean;
    let lat_s = secured.latency.mean;
    Ok(OverheadReport {
        config: baseline.config,
        baseline_environment: baseline.environment.clone(),
        secured_environment: secured.environment.clone(),
        throughput_overhead_pct: (thr_b - thr_s) / thr_b * 100.0,
        latency_overhead_pct: (lat_s - lat_b) / lat_b * 100.0,
        throughput_formula: "(baseline_mean_tps - secured_mean_tps) / baseline_mean_tps * 100"
            .into(),
        latency_formula: "(secured_mean_latency - baseline_mean_latency) / baseline_mean_latency * 100"
            .into(),
    })
}

// ---------------------------------------------------------------------------
// Report files: line-delimited JSON records behind a version header.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(tag = "record")]
enum ReportRecord {
    #[serde(rename = "header")]
    Header { format: String, version: u32 },
    #[serde(rename = "report")]
    Report(BenchmarkReport),
}

pub fn write_report(report: &BenchmarkReport, out: &mut dyn Write) -> Result<(), BenchError> {
    let header = ReportRecord::Header {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
    };
    serde_json::to_writer(&mut *out, &header).map_err(|e| BenchError::Format(e.to_string()))?;
    out.write_all(b"\n")?;
    serde_json::to_writer(&mut *out, &ReportRecord::Report(report.clone()))
        .map_err(|e| BenchError::Format(e.to_string()))?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_report(input: &mut dyn BufRead) -> Result<BenchmarkReport, BenchError> {
    let mut lines = input.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| BenchError::Format("empty report file".into()))??;
    match serde_json::from_str(&header_line) {
        Ok(ReportRecord::Header { format, version })
            if format == REPORT_FORMAT && version == REPORT_VERSION => {}
        Ok(_) => return Err(BenchError::Format("missing or wrong header record".into())),
        Err(e) => return Err(BenchError::Format(e.to_string())),
    }
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if let ReportRecord::Report(report) =
            serde_json::from_str(&line).map_err(|e| BenchError::Format(e.to_string()))?
        {
            return Ok(report);
        }
    }
    Err(BenchError::Format("no report record found".into()))
}
