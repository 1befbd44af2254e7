//! Model hyperparameters and the parameter-name/shape manifest derived
//! from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoEConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub expert_ff_dim: usize,
    /// Leading layers that keep a dense MLP.
    pub n_dense_prefix_layers: usize,
    /// Load-balancing bias step gamma.
    pub router_bias_step: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub ff_dim: usize,
    pub n_heads: usize,
    pub n_kv_groups: usize,
    pub head_size: usize,
    pub attn_layer_indices: Vec<usize>,
    pub conv_kernel: usize,
    pub vocab_size: usize,
    pub rope_base: f32,
    #[serde(default)]
    pub moe: Option<MoEConfig>,
    pub context_limit: usize,
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.vocab_size == 0 {
            return Err(Error::Config("zero-sized model dimension".into()));
        }
        if self.conv_kernel == 0 {
            return Err(Error::Config("conv kernel must be >= 1".into()));
        }
        if self.n_kv_groups == 0 || self.n_heads % self.n_kv_groups != 0 {
            return Err(Error::Config(format!(
                "n_heads {} not divisible by n_kv_groups {}",
                self.n_heads, self.n_kv_groups
            )));
        }
        if self.head_size % 2 != 0 {
            return Err(Error::Config(format!("head size {} must be even", self.head_size)));
        }
        let mut seen = self.attn_layer_indices.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.attn_layer_indices.len() {
            return Err(Error::Config("duplicate attention layer index".into()));
        }
        if self.attn_layer_indices.iter().any(|&i| i >= self.n_layers) {
            return Err(Error::Config("attention layer index out of range".into()));
        }
        if self.context_limit == 0 {
            return Err(Error::Config("context_limit must be positive".into()));
        }
        if let Some(moe) = &self.moe {
            if moe.top_k == 0 || moe.top_k > moe.n_experts {
                return Err(Error::Config(format!(
                    "moe top_k {} not in [1, {}]",
                    moe.top_k, moe.n_experts
                )));
            }
            if moe.expert_ff_dim == 0 {
                return Err(Error::Config("moe expert_ff_dim must be >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn is_attention_layer(&self, layer: usize) -> bool {
        self.attn_layer_indices.contains(&layer)
    }

    pub fn is_moe_layer(&self, layer: usize) -> bool {
        self.moe
            .as_ref()
            .map_or(false, |m| layer >= m.n_dense_prefix_layers)
    }

    /// Width of the concatenated query heads.
    pub fn q_width(&self) -> usize {
        self.n_heads * self.head_size
    }

    /// Width of the shared K/V projection.
    pub fn kv_width(&self) -> usize {
        self.n_kv_groups * self.head_size
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: ModelConfig =
            serde_json::from_str(json).map_err(|e| Error::Parse(format!("model config: {}", e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Evenly spaced attention positions for a layer count, the default when
    /// the placement is not given explicitly.
    pub fn evenly_spaced_attention(n_layers: usize, n_attn: usize) -> Vec<usize> {
        (0..n_attn)
            .map(|i| (i * n_layers + n_layers / 2) / n_attn.max(1))
            .collect()
    }

    /// Every parameter the model requires: (name, shape, initializer).
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let d = self.d_model;
        let mut specs = vec![(
            "embed.weight".to_string(),
            vec![self.vocab_size, d],
            Init::NormalFanIn(d),
        )];
        for layer in 0..self.n_layers {
            let p = |suffix: &str| format!("layers.{}.{}", layer, suffix);
            specs.push((p("mixer_norm.gain"), vec![d], Init::One));
            if self.is_attention_layer(layer) {
                specs.push((p("attn.q_proj"), vec![d, self.q_width()], Init::NormalFanIn(d)));
                specs.push((p("attn.k_proj"), vec![d, self.kv_width()], Init::NormalFanIn(d)));
                specs.push((p("attn.v_proj"), vec![d, self.kv_width()], Init::NormalFanIn(d)));
                specs.push((
                    p("attn.o_proj"),
                    vec![self.q_width(), d],
                    Init::NormalFanIn(self.q_width()),
                ));
                specs.push((p("attn.q_norm.gain"), vec![self.head_size], Init::One));
                specs.push((p("attn.k_norm.gain"), vec![self.head_size], Init::One));
            } else {
                specs.push((p("conv.in_proj"), vec![d, 3 * d], Init::NormalFanIn(d)));
                specs.push((p("conv.in_proj_bias"), vec![3 * d], Init::Zero));
                specs.push((
                    p("conv.weight"),
                    vec![d, self.conv_kernel],
                    Init::NormalFanIn(self.conv_kernel),
                ));
                specs.push((p("conv.bias"), vec![d], Init::Zero));
                specs.push((p("conv.out_proj"), vec![d, d], Init::NormalFanIn(d)));
                specs.push((p("conv.out_proj_bias"), vec![d], Init::Zero));
            }
            specs.push((p("mlp_norm.gain"), vec![d], Init::One));
            if self.is_moe_layer(layer) {
                let moe = self.moe.as_ref().unwrap();
                specs.push((p("moe.router"), vec![d, moe.n_experts], Init::NormalFanIn(d)));
                specs.push((p("moe.router_bias"), vec![moe.n_experts], Init::Zero));
                for e in 0..moe.n_experts {
                    let ep = |suffix: &str| p(&format!("moe.experts.{}.{}", e, suffix));
                    specs.push((ep("w_gate"), vec![d, moe.expert_ff_dim], Init::NormalFanIn(d)));
                    specs.push((ep("w_up"), vec![d, moe.expert_ff_dim], Init::NormalFanIn(d)));
                    specs.push((
                        ep("w_down"),
                        vec![moe.expert_ff_dim, d],
                        Init::NormalFanIn(moe.expert_ff_dim),
                    ));
                }
            } else {
                specs.push((p("mlp.w_gate"), vec![d, self.ff_dim], Init::NormalFanIn(d)));
                specs.push((p("mlp.w_up"), vec![d, self.ff_dim], Init::NormalFanIn(d)));
                specs.push((p("mlp.w_down"), vec![self.ff_dim, d], Init::NormalFanIn(self.ff_dim)));
            }
        }
        specs.push(("final_norm.gain".to_string(), vec![d], Init::One));
        if !self.tie_embeddings {
            specs.push((
                "head.weight".to_string(),
                vec![d, self.vocab_size],
                Init::NormalFanIn(d),
            ));
        }
        specs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    NormalFanIn(usize),
    Zero,
    One,
}
