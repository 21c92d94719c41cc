use fmtee::bench::*;
use fmtee::inference::{EnclaveTax, GenerationConfig, Generator, TokenSequence};
use fmtee::model::ModelWeights;
use rand::{rngs::StdRng, SeedableRng};

fn mean(s: &[TokenTimingSample]) -> f64 { s.iter().map(|x| x.duration_secs).sum::<f64>() / s.len() as f64 }

struct TaxedBare(ModelWeights, EnclaveTax);
impl GenerationTarget for TaxedBare {
    fn label(&self) -> String { "taxed-bare".into() }
    fn run(&mut self, cfg: &GenerationConfig, run_id: u32) -> Result<Vec<std::time::Duration>, BenchError> {
        let mut rng = StdRng::seed_from_u64(11 ^ ((run_id as u64) << 32));
        let prompts: Vec<TokenSequence> = (0..cfg.batch_size).map(|_| TokenSequence::random(&mut rng, 1024, cfg.input_length as usize)).collect();
        Ok(Generator::with_tax(&self.0, self.1).generate(&prompts, cfg).unwrap().step_timings)
    }
}

fn main() {
    let weights = ModelWeights::generate(4242, 1024, 64, 8);
    let cfg = GenerationConfig { batch_size: 6, beam_width: 4, max_new_tokens: 128, input_length: 1024 };

    let mut bare = BareTarget::new(weights.clone(), 11);
    warm_up(&mut bare, &cfg).unwrap();
    let calib = measure(&mut bare, &cfg, 1000).unwrap();
    let m = summarize(&filter_outliers(&calib).unwrap(), &cfg, "c").unwrap().latency.mean;
    let accesses = steady_state_accesses(&cfg, 1024, 8);
    let tax = EnclaveTax { delay_per_access_ns: 0.05 * m * 1e9 / accesses as f64 };
    println!("calib {:.1}us, spin/step {:.1}us", m*1e6, tax.delay_per_access_ns*accesses as f64/1000.0);

    // Pure spin, no enclave.
    let mut taxed = TaxedBare(weights.clone(), tax);
    let (a, b) = measure_paired(&mut bare, &mut taxed, &cfg, 1000).unwrap();
    println!("taxed-bare: bare {:.1}us taxed {:.1}us -> +{:.2}%", mean(&a)*1e6, mean(&b)*1e6, (mean(&b)-mean(&a))/mean(&a)*100.0);

    // Enclave with ZERO tax (isolates the digest touch + memory effects).
    let mut enc0 = EnclaveTarget::provision(&weights, EnclaveTax::none(), 11).unwrap();
    warm_up(&mut enc0, &cfg).unwrap();
    let (c, d) = measure_paired(&mut bare, &mut enc0, &cfg, 1000).unwrap();
    println!("enclave(tax0): bare {:.1}us enc {:.1}us -> +{:.2}%", mean(&c)*1e6, mean(&d)*1e6, (mean(&d)-mean(&c))/mean(&c)*100.0);
}
