//! Model assembly: parameter construction, prefill, and streaming decode.
//!
//! Prefill and decode share one per-token forward path, so a prefill is by
//! construction the same computation as feeding the tokens one at a time.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::blocks::{
    attn_step, gated_conv_step, mlp_step, moe_step, rms_norm_vec, vec_mat, AttnBlockWeights,
    AttnGeom, AttnState, ConvBlockWeights, ConvState, MlpWeights, MoeWeights,
};
use super::config::{Init, ModelConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{RngSeed, Tensor};

pub struct Model {
    config: ModelConfig,
    params: Checkpoint,
}

impl Model {
    /// Binds parameters to a config, checking every required name and shape.
    pub fn new(config: ModelConfig, params: Checkpoint) -> Result<Self> {
        config.validate()?;
        for (name, shape, _) in config.param_specs() {
            let t = params.require(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "parameter {}: expected shape {:?}, found {:?}",
                    name,
                    shape,
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Checkpoint {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.config
            .param_specs()
            .iter()
            .map(|(_, shape, _)| shape.iter().product::<usize>())
            .sum()
    }

    pub fn new_session(&self) -> SessionState {
        SessionState::new(&self.config)
    }

    fn layer(&self, layer: usize, suffix: &str) -> &Tensor {
        self.params
            .get(&format!("layers.{}.{}", layer, suffix))
            .expect("validated at construction")
    }

    /// Single-token forward. `state` supplies and accumulates all
    /// cross-position context; work in conv layers is O(k*d) regardless of
    /// the current position.
    pub fn forward_token(&self, token: u32, state: &mut SessionState) -> Result<Vec<f32>> {
        let x = self.forward_hidden(token, state)?;
        let cfg = &self.config;
        let d = cfg.d_model;
        let logits = if cfg.tie_embeddings {
            let embed = self.params.require("embed.weight")?;
            let mut out = vec![0.0f32; cfg.vocab_size];
            for (o, row) in out.iter_mut().zip(embed.data().chunks(d)) {
                *o = x.iter().zip(row).map(|(a, b)| a * b).sum();
            }
            out
        } else {
            vec_mat(&x, self.params.require("head.weight")?)
        };
        Ok(logits)
    }

    /// The final-norm hidden state for one token, without the output head.
    pub fn forward_hidden(&self, token: u32, state: &mut SessionState) -> Result<Vec<f32>> {
        let cfg = &self.config;
        if token as usize >= cfg.vocab_size {
            return Err(Error::Input(format!(
                "token id {} out of range for vocab {}",
                token, cfg.vocab_size
            )));
        }
        if state.position >= cfg.context_limit {
            return Err(Error::Capacity(format!(
                "position {} at context limit {}",
                state.position, cfg.context_limit
            )));
        }
        let d = cfg.d_model;
        let embed = self.params.require("embed.weight")?;
        let mut x: Vec<f32> = embed.data()[token as usize * d..(token as usize + 1) * d].to_vec();

        for layer in 0..cfg.n_layers {
            let normed = rms_norm_vec(&x, self.layer(layer, "mixer_norm.gain").data());
            let mixed = match &mut state.layers[layer] {
                LayerState::Conv(cs) => {
                    let w = ConvBlockWeights {
                        in_proj: self.layer(layer, "conv.in_proj"),
                        in_proj_bias: self.layer(layer, "conv.in_proj_bias"),
                        conv_weight: self.layer(layer, "conv.weight"),
                        conv_bias: self.layer(layer, "conv.bias"),
                        out_proj: self.layer(layer, "conv.out_proj"),
                        out_proj_bias: self.layer(layer, "conv.out_proj_bias"),
                    };
                    gated_conv_step(&normed, &w, cs)
                }
                LayerState::Attn(asr) => {
                    let w = AttnBlockWeights {
                        q_proj: self.layer(layer, "attn.q_proj"),
                        k_proj: self.layer(layer, "attn.k_proj"),
                        v_proj: self.layer(layer, "attn.v_proj"),
                        o_proj: self.layer(layer, "attn.o_proj"),
                        q_norm_gain: self.layer(layer, "attn.q_norm.gain"),
                        k_norm_gain: self.layer(layer, "attn.k_norm.gain"),
                    };
                    let geom = AttnGeom {
                        n_heads: cfg.n_heads,
                        n_kv_groups: cfg.n_kv_groups,
                        head_size: cfg.head_size,
                        rope_base: cfg.rope_base,
                    };
                    attn_step(&normed, &w, &geom, asr)
                }
            };
            for (xi, m) in x.iter_mut().zip(&mixed) {
                *xi += m;
            }

            let normed = rms_norm_vec(&x, self.layer(layer, "mlp_norm.gain").data());
            let ff = if cfg.is_moe_layer(layer) {
                let moe = cfg.moe.as_ref().unwrap();
                let experts = (0..moe.n_experts)
                    .map(|e| MlpWeights {
                        w_gate: self.layer(layer, &format!("moe.experts.{}.w_gate", e)),
                        w_up: self.layer(layer, &format!("moe.experts.{}.w_up", e)),
                        w_down: self.layer(layer, &format!("moe.experts.{}.w_down", e)),
                    })
                    .collect();
                let w = MoeWeights {
                    router: self.layer(layer, "moe.router"),
                    router_bias: self.layer(layer, "moe.router_bias"),
                    experts,
                    top_k: moe.top_k,
                };
                let (out, chosen) = moe_step(&normed, &w)?;
                for e in chosen {
                    state.moe_load[layer][e] += 1;
                }
                out
            } else {
                let w = MlpWeights {
                    w_gate: self.layer(layer, "mlp.w_gate"),
                    w_up: self.layer(layer, "mlp.w_up"),
                    w_down: self.layer(layer, "mlp.w_down"),
                };
                mlp_step(&normed, &w)
            };
            for (xi, f) in x.iter_mut().zip(&ff) {
                *xi += f;
            }
        }

        let x = rms_norm_vec(&x, self.params.require("final_norm.gain")?.data());
        state.position += 1;
        Ok(x)
    }

    /// Final-norm hidden states [L, d] for a whole sequence.
    pub fn hidden_states(&self, tokens: &[u32]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::Input("need at least one token".into()));
        }
        let mut state = self.new_session();
        let d = self.config.d_model;
        let mut out = Vec::with_capacity(tokens.len() * d);
        for &tok in tokens {
            out.extend(self.forward_hidden(tok, &mut state)?);
        }
        Tensor::new(vec![tokens.len(), d], out)
    }

    /// Forward a whole prompt. Returns per-position logits [L, vocab] and the
    /// session positioned for decoding at position L.
    pub fn prefill(&self, tokens: &[u32]) -> Result<(Tensor, SessionState)> {
        if tokens.is_empty() {
            return Err(Error::Input("prefill requires at least one token".into()));
        }
        if tokens.len() > self.config.context_limit {
            return Err(Error::Capacity(format!(
                "prompt length {} exceeds context limit {}",
                tokens.len(),
                self.config.context_limit
            )));
        }
        let mut state = self.new_session();
        let mut logits = Vec::with_capacity(tokens.len() * self.config.vocab_size);
        for &tok in tokens {
            logits.extend(self.forward_token(tok, &mut state)?);
        }
        Ok((
            Tensor::new(vec![tokens.len(), self.config.vocab_size], logits)?,
            state,
        ))
    }

    pub fn decode_step(&self, token: u32, state: &mut SessionState) -> Result<Tensor> {
        let logits = self.forward_token(token, state)?;
        Tensor::new(vec![self.config.vocab_size], logits)
    }
}

enum LayerState {
    Conv(ConvState),
    Attn(AttnState),
}

pub struct SessionState {
    layers: Vec<LayerState>,
    position: usize,
    moe_load: Vec<Vec<u64>>,
    kv_width: usize,
}

impl SessionState {
    fn new(cfg: &ModelConfig) -> Self {
        let layers = (0..cfg.n_layers)
            .map(|l| {
                if cfg.is_attention_layer(l) {
                    LayerState::Attn(AttnState::default())
                } else {
                    LayerState::Conv(ConvState::new(cfg.d_model, cfg.conv_kernel))
                }
            })
            .collect();
        let n_experts = cfg.moe.as_ref().map_or(0, |m| m.n_experts);
        let moe_load = (0..cfg.n_layers)
            .map(|l| vec![0u64; if cfg.is_moe_layer(l) { n_experts } else { 0 }])
            .collect();
        Self {
            layers,
            position: 0,
            moe_load,
            kv_width: cfg.kv_width(),
        }
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn moe_load(&self, layer: usize) -> &[u64] {
        &self.moe_load[layer]
    }

    /// Total state footprint in bytes: (k-1)*d floats per conv layer,
    /// 2 * n_kv_groups * head_size floats per position per attention layer.
    pub fn state_bytes(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerState::Conv(c) => c.state_floats(),
                LayerState::Attn(a) => a.state_floats(),
            })
            .sum::<usize>()
            * std::mem::size_of::<f32>()
    }

    /// The footprint the layout implies for a given position, used to check
    /// the accounting above against actual buffers.
    pub fn expected_state_bytes(cfg: &ModelConfig, position: usize) -> usize {
        let mut floats = 0usize;
        for l in 0..cfg.n_layers {
            if cfg.is_attention_layer(l) {
                floats += 2 * cfg.kv_width() * position;
            } else {
                floats += (cfg.conv_kernel - 1) * cfg.d_model;
            }
        }
        floats * std::mem::size_of::<f32>()
    }

    pub fn kv_positions(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l {
                LayerState::Attn(a) => Some(a.positions(self.kv_width)),
                _ => None,
            })
            .unwrap_or(0)
    }
}

/// Deterministic initialization: each tensor is drawn from its own stream
/// keyed by parameter name, so the result does not depend on enumeration
/// order.
pub fn build_model(config: ModelConfig, seed: RngSeed) -> Result<Model> {
    config.validate()?;
    let mut ckpt = Checkpoint::new();
    for (name, shape, init) in config.param_specs() {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zero => vec![0.0; n],
            Init::One => vec![1.0; n],
            Init::NormalFanIn(fan_in) => {
                let normal = Normal::new(0.0f64, (1.0 / fan_in as f64).sqrt()).unwrap();
                let mut rng = seed.for_name(&name);
                (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
            }
        };
        ckpt.insert(&name, Tensor::new(shape, data)?);
    }
    Model::new(config, ckpt)
}

/// Greedy / temperature sampling over a logit row.
pub fn sample_token(logits: &[f32], temperature: f32, rng: &mut impl Rng) -> u32 {
    if temperature <= 0.0 {
        return logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i as u32)
            .unwrap_or(0);
    }
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let weights: Vec<f64> = logits
        .iter()
        .map(|&l| (((l - max) / temperature) as f64).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i as u32;
        }
        u -= w;
    }
    (logits.len() - 1) as u32
}
