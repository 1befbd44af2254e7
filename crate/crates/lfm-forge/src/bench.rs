//! Batch-1 throughput measurement: prompt tokens per second at fixed prefix
//! lengths and decode tokens per second when generating a fixed number of
//! tokens after each prefix.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{sample_token, Model};
use crate::error::{Error, Result};
use crate::tensor::RngSeed;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextResult {
    pub context_len: usize,
    pub prefill_tok_per_s: f64,
    pub decode_tok_per_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub model: String,
    pub n_decode: usize,
    pub repeats: usize,
    pub contexts: Vec<ContextResult>,
    pub peak_state_bytes: usize,
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<10} {:>18} {:>18}\n",
            "context", "prefill tok/s", "decode tok/s"
        );
        for c in &self.contexts {
            out.push_str(&format!(
                "{:<10} {:>18.1} {:>18.1}\n",
                c.context_len, c.prefill_tok_per_s, c.decode_tok_per_s
            ));
        }
        out.push_str(&format!("peak state: {} bytes\n", self.peak_state_bytes));
        out
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Runs the measurement protocol: seeded-random prompts, one untimed warmup,
/// median over `repeats` timed runs per context length.
pub fn run_bench(
    model: &Model,
    name: &str,
    context_lengths: &[usize],
    n_decode: usize,
    repeats: usize,
    seed: RngSeed,
) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be >= 1".into()));
    }
    let limit = model.config().context_limit;
    for &l in context_lengths {
        if l == 0 || l + n_decode > limit {
            return Err(Error::Capacity(format!(
                "context {} + {} decode tokens exceeds limit {}",
                l, n_decode, limit
            )));
        }
    }
    let vocab = model.config().vocab_size as u32;
    let mut contexts = Vec::new();
    let mut peak_state = 0usize;
    for &len in context_lengths {
        let mut rng = seed.for_name(&format!("bench/{}", len));
        let prompt: Vec<u32> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();

        let mut prefill_rates = Vec::with_capacity(repeats);
        let mut decode_rates = Vec::with_capacity(repeats);
        for run in 0..repeats + 1 {
            let t0 = Instant::now();
            let (logits, mut state) = model.prefill(&prompt)?;
            let prefill_secs = t0.elapsed().as_secs_f64();

            let last = &logits.data()[(len - 1) * vocab as usize..];
            let mut tok = sample_token(last, 0.0, &mut rng);
            let t1 = Instant::now();
            for _ in 0..n_decode {
                let step = model.decode_step(tok, &mut state)?;
                tok = sample_token(step.data(), 0.0, &mut rng);
            }
            let decode_secs = t1.elapsed().as_secs_f64();
            peak_state = peak_state.max(state.state_bytes());
            if run == 0 {
                continue; // warmup
            }
            prefill_rates.push(len as f64 / prefill_secs.max(1e-12));
            decode_rates.push(n_decode as f64 / decode_secs.max(1e-12));
        }
        contexts.push(ContextResult {
            context_len: len,
            prefill_tok_per_s: median(prefill_rates),
            decode_tok_per_s: median(decode_rates),
        });
    }
    Ok(BenchReport {
        schema_version: SCHEMA_VERSION,
        model: name.to_string(),
        n_decode,
        repeats,
        contexts,
        peak_state_bytes: peak_state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_model, ModelConfig};

    fn small_model() -> Model {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            ff_dim: 32,
            n_heads: 2,
            n_kv_groups: 1,
            head_size: 8,
            attn_layer_indices: vec![1],
            conv_kernel: 3,
            vocab_size: 32,
            rope_base: 10000.0,
            moe: None,
            context_limit: 256,
            tie_embeddings: true,
        };
        build_model(cfg, RngSeed(2)).unwrap()
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn report_fields_populated() {
        let model = small_model();
        let report = run_bench(&model, "toy", &[16, 32], 8, 2, RngSeed(1)).unwrap();
        assert_eq!(report.schema_version, SCHEMA_VERSION);
        assert_eq!(report.contexts.len(), 2);
        for c in &report.contexts {
            assert!(c.prefill_tok_per_s > 0.0);
            assert!(c.decode_tok_per_s > 0.0);
        }
        assert!(report.peak_state_bytes > 0);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("schema_version"));
        let table = report.table();
        assert!(table.contains("prefill"));
    }

    #[test]
    fn rejects_over_limit_context() {
        let model = small_model();
        assert!(run_bench(&model, "toy", &[250], 100, 1, RngSeed(1)).is_err());
        assert!(run_bench(&model, "toy", &[16], 8, 0, RngSeed(1)).is_err());
    }
}
