//! Recompute-from-scratch check: the streaming per-token forward must match
//! an independent full-sequence implementation built only on batch tensor
//! ops (matmul, batch RMS norm, batch causal conv, batch RoPE, masked
//! softmax).

use rand::Rng;

use lfm_forge::backbone::{build_model, Model, ModelConfig, NORM_EPS};
use lfm_forge::tensor::{
    depthwise_causal_conv, matmul, rms_norm, rope_rotate, silu, softmax_last, RngSeed, Tensor,
};

fn batch_rms_norm(x: &Tensor, gain: &Tensor) -> Tensor {
    rms_norm(x, gain, NORM_EPS).unwrap()
}

fn add(a: &mut Tensor, b: &Tensor) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

fn broadcast_add_row(x: &mut Tensor, bias: &Tensor) {
    let cols = bias.len();
    for row in x.data_mut().chunks_mut(cols) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn columns(x: &Tensor, from: usize, to: usize) -> Tensor {
    let (l, cols) = (x.shape()[0], x.shape()[1]);
    let mut data = Vec::with_capacity(l * (to - from));
    for row in 0..l {
        data.extend_from_slice(&x.data()[row * cols + from..row * cols + to]);
    }
    Tensor::new(vec![l, to - from], data).unwrap()
}

fn conv_layer_oracle(model: &Model, layer: usize, h: &Tensor) -> Tensor {
    let p = |s: &str| model.params().require(&format!("layers.{}.{}", layer, s)).unwrap();
    let mut proj = matmul(h, p("conv.in_proj")).unwrap();
    broadcast_add_row(&mut proj, p("conv.in_proj_bias"));
    let d = model.config().d_model;
    let b = columns(&proj, 0, d);
    let c = columns(&proj, d, 2 * d);
    let h_tilde = columns(&proj, 2 * d, 3 * d);
    let y = hadamard(&b, &h_tilde);
    let z = depthwise_causal_conv(&y, p("conv.weight"), p("conv.bias")).unwrap();
    let mut out = matmul(&hadamard(&c, &z), p("conv.out_proj")).unwrap();
    broadcast_add_row(&mut out, p("conv.out_proj_bias"));
    out
}

fn attn_layer_oracle(model: &Model, layer: usize, h: &Tensor) -> Tensor {
    let cfg = model.config();
    let p = |s: &str| model.params().require(&format!("layers.{}.{}", layer, s)).unwrap();
    let l = h.shape()[0];
    let (nh, ng, s) = (cfg.n_heads, cfg.n_kv_groups, cfg.head_size);

    let norm_rope = |x: &Tensor, heads: usize, gain: &Tensor| {
        let flat = Tensor::new(vec![l * heads, s], x.data().to_vec()).unwrap();
        let normed = rms_norm(&flat, gain, NORM_EPS).unwrap();
        rope_rotate(
            &Tensor::new(vec![l, heads, s], normed.data().to_vec()).unwrap(),
            cfg.rope_base,
        )
        .unwrap()
    };
    let q = norm_rope(&matmul(h, p("attn.q_proj")).unwrap(), nh, p("attn.q_norm.gain"));
    let k = norm_rope(&matmul(h, p("attn.k_proj")).unwrap(), ng, p("attn.k_norm.gain"));
    let v = matmul(h, p("attn.v_proj")).unwrap();

    let mut concat = vec![0.0f32; l * nh * s];
    let scale = 1.0 / (s as f32).sqrt();
    for head in 0..nh {
        let g = head / (nh / ng);
        for t in 0..l {
            let qv = &q.data()[(t * nh + head) * s..(t * nh + head + 1) * s];
            let mut logits = vec![f32::NEG_INFINITY; l];
            for pos in 0..=t {
                let kv = &k.data()[(pos * ng + g) * s..(pos * ng + g + 1) * s];
                logits[pos] = qv.iter().zip(kv).map(|(a, b)| a * b).sum::<f32>() * scale;
            }
            let mask: Vec<bool> = (0..l).map(|pos| pos <= t).collect();
            let probs = softmax_last(&Tensor::from_vec(logits), Some(&mask)).unwrap();
            for pos in 0..=t {
                let val = &v.data()[pos * ng * s + g * s..pos * ng * s + (g + 1) * s];
                for j in 0..s {
                    concat[(t * nh + head) * s + j] += probs.data()[pos] * val[j];
                }
            }
        }
    }
    matmul(
        &Tensor::new(vec![l, nh * s], concat).unwrap(),
        p("attn.o_proj"),
    )
    .unwrap()
}

fn mlp_oracle(model: &Model, layer: usize, h: &Tensor) -> Tensor {
    let p = |s: &str| model.params().require(&format!("layers.{}.{}", layer, s)).unwrap();
    let gate = matmul(h, p("mlp.w_gate")).unwrap();
    let up = matmul(h, p("mlp.w_up")).unwrap();
    let hidden: Vec<f32> = gate
        .data()
        .iter()
        .zip(up.data())
        .map(|(g, u)| silu(*g) * u)
        .collect();
    matmul(
        &Tensor::new(gate.shape().to_vec(), hidden).unwrap(),
        p("mlp.w_down"),
    )
    .unwrap()
}

fn prefill_oracle(model: &Model, tokens: &[u32]) -> Tensor {
    let cfg = model.config();
    let d = cfg.d_model;
    let embed = model.params().require("embed.weight").unwrap();
    let mut x = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        x.extend_from_slice(&embed.data()[t as usize * d..(t as usize + 1) * d]);
    }
    let mut h = Tensor::new(vec![tokens.len(), d], x).unwrap();
    for layer in 0..cfg.n_layers {
        let p = |s: &str| model.params().require(&format!("layers.{}.{}", layer, s)).unwrap();
        let normed = batch_rms_norm(&h, p("mixer_norm.gain"));
        let mixed = if cfg.is_attention_layer(layer) {
            attn_layer_oracle(model, layer, &normed)
        } else {
            conv_layer_oracle(model, layer, &normed)
        };
        add(&mut h, &mixed);
        let normed = batch_rms_norm(&h, p("mlp_norm.gain"));
        let ff = mlp_oracle(model, layer, &normed);
        add(&mut h, &ff);
    }
    let h = batch_rms_norm(&h, model.params().require("final_norm.gain").unwrap());
    matmul(&h, model.params().require("head.weight").unwrap()).unwrap()
}

#[test]
fn streaming_forward_matches_batch_oracle() {
    let cfg = ModelConfig {
        n_layers: 3,
        d_model: 32,
        ff_dim: 64,
        n_heads: 4,
        n_kv_groups: 2,
        head_size: 8,
        attn_layer_indices: vec![1],
        conv_kernel: 3,
        vocab_size: 64,
        rope_base: 10000.0,
        moe: None,
        context_limit: 128,
        tie_embeddings: false,
    };
    let model = build_model(cfg, RngSeed(42)).unwrap();
    let mut rng = RngSeed(43).rng();
    for _ in 0..5 {
        let len = rng.gen_range(1..40usize);
        let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(0..64)).collect();
        let (got, _) = model.prefill(&tokens).unwrap();
        let want = prefill_oracle(&model, &tokens);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-4, "{} vs {}", a, b);
        }
    }
}
