//! Dense f32 tensors and the small set of numeric kernels the rest of the
//! crate is built from, plus a central-difference gradient checker used as
//! the oracle for every analytic loss gradient.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense tensor of 32-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Length of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Seed for all pseudo-random streams; identical seeds give identical streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Independent stream derived from this seed and a name, stable across
    /// runs and iteration orders (FNV-1a over the name, xored with the seed).
    pub fn for_name(&self, name: &str) -> ChaCha8Rng {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        ChaCha8Rng::seed_from_u64(h ^ self.0)
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

/// RMS normalization over the last axis with a learned gain.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.last_dim();
    if gain.len() != d {
        return Err(Error::Dimension(format!(
            "rms_norm: gain length {} != last axis {}",
            gain.len(),
            d
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Config("rms_norm: eps must be positive".into()));
    }
    let mut out = x.clone();
    for row in out.data.chunks_mut(d) {
        let ms: f64 = row.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + eps as f64).sqrt();
        for (v, g) in row.iter_mut().zip(gain.data()) {
            *v = ((*v as f64) * inv) as f32 * g;
        }
    }
    Ok(out)
}

/// Depthwise causal 1D convolution along the sequence axis with left
/// zero-padding: z[t,c] = bias[c] + sum_i weights[c,i] * y[t-i,c].
pub fn depthwise_causal_conv(y: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [l, d] = dims2(y, "depthwise_causal_conv input")?;
    let [wd, k] = dims2(weights, "depthwise_causal_conv weights")?;
    if wd != d || bias.len() != d {
        return Err(Error::Dimension(format!(
            "depthwise_causal_conv: channels {} vs weights {} / bias {}",
            d,
            wd,
            bias.len()
        )));
    }
    let mut out = Tensor::zeros(vec![l, d]);
    for t in 0..l {
        for c in 0..d {
            let mut acc = bias.data()[c];
            for i in 0..k.min(t + 1) {
                acc += weights.data()[c * k + i] * y.data()[(t - i) * d + c];
            }
            out.data[t * d + c] = acc;
        }
    }
    Ok(out)
}

/// Rotary position embedding over a [L, H, s] tensor, positions starting at
/// `start_pos`. Pair j rotates by angle pos * base^(-2j/s).
pub fn rope_rotate_from(x: &Tensor, base: f32, start_pos: usize) -> Result<Tensor> {
    let (l, h, s) = match *x.shape() {
        [l, h, s] => (l, h, s),
        _ => {
            return Err(Error::Dimension(format!(
                "rope_rotate: expected [L,H,s], got {:?}",
                x.shape()
            )))
        }
    };
    if s % 2 != 0 {
        return Err(Error::Config(format!("rope_rotate: head size {} is odd", s)));
    }
    let mut out = x.clone();
    for t in 0..l {
        let pos = (start_pos + t) as f64;
        for head in 0..h {
            let off = (t * h + head) * s;
            for j in 0..s / 2 {
                let theta = pos * (base as f64).powf(-2.0 * j as f64 / s as f64);
                let (sin, cos) = theta.sin_cos();
                let a = x.data()[off + 2 * j] as f64;
                let b = x.data()[off + 2 * j + 1] as f64;
                out.data[off + 2 * j] = (a * cos - b * sin) as f32;
                out.data[off + 2 * j + 1] = (a * sin + b * cos) as f32;
            }
        }
    }
    Ok(out)
}

pub fn rope_rotate(x: &Tensor, base: f32) -> Result<Tensor> {
    rope_rotate_from(x, base, 0)
}

/// Numerically stable softmax over the last axis. Masked entries become
/// exactly zero; a fully masked row is a domain error.
pub fn softmax_last(x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let n = x.last_dim();
    if let Some(m) = mask {
        if m.len() != x.len() {
            return Err(Error::Dimension(format!(
                "softmax_last: mask length {} != {}",
                m.len(),
                x.len()
            )));
        }
    }
    let mut out = x.clone();
    let rows = x.len() / n.max(1);
    for r in 0..rows {
        let row = &mut out.data[r * n..(r + 1) * n];
        let keep = |j: usize| mask.map_or(true, |m| m[r * n + j]);
        let mut max = f64::NEG_INFINITY;
        for (j, v) in row.iter().enumerate() {
            if keep(j) {
                max = max.max(*v as f64);
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::Domain(format!("softmax_last: row {} fully masked", r)));
        }
        let mut sum = 0.0f64;
        for (j, v) in row.iter_mut().enumerate() {
            if keep(j) {
                let e = ((*v as f64) - max).exp();
                *v = e as f32;
                sum += e;
            } else {
                *v = 0.0;
            }
        }
        for v in row.iter_mut() {
            *v = ((*v as f64) / sum) as f32;
        }
    }
    Ok(out)
}

/// [n,d] x [d,f] matrix product.
pub fn matmul(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let d = x.last_dim();
    let [wd, f] = dims2(w, "matmul rhs")?;
    if wd != d {
        return Err(Error::Dimension(format!(
            "matmul: inner dims {} vs {}",
            d, wd
        )));
    }
    let n = x.len() / d;
    let mut out = Tensor::zeros(vec![n, f]);
    for i in 0..n {
        let xrow = &x.data()[i * d..(i + 1) * d];
        let orow = &mut out.data[i * f..(i + 1) * f];
        for (c, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &w.data()[c * f..(c + 1) * f];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    Ok(out)
}

/// SwiGLU feed-forward: (silu(x W_gate) * (x W_up)) W_down.
pub fn swiglu(x: &Tensor, w_gate: &Tensor, w_up: &Tensor, w_down: &Tensor) -> Result<Tensor> {
    let mut gate = matmul(x, w_gate)?;
    let up = matmul(x, w_up)?;
    if gate.shape() != up.shape() {
        return Err(Error::Dimension("swiglu: gate/up shape mismatch".into()));
    }
    for (g, u) in gate.data.iter_mut().zip(up.data()) {
        *g = silu(*g) * u;
    }
    let mut out = matmul(&gate, w_down)?;
    out.shape = x.shape().to_vec();
    Ok(out)
}

/// Central-difference gradient of a scalar function, one coordinate at a
/// time. The effective step is recomputed from the rounded f32 endpoints so
/// f32 quantization of x +- h does not bias the estimate.
pub fn fd_gradient<F>(f: F, x: &Tensor, h: f32) -> Result<Tensor>
where
    F: Fn(&Tensor) -> f64,
{
    if h <= 0.0 {
        return Err(Error::Config("fd_gradient: step must be positive".into()));
    }
    let mut grad = Tensor::zeros(x.shape().to_vec());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data[i] = orig + h;
        let hi_x = probe.data[i];
        let hi = f(&probe);
        probe.data[i] = orig - h;
        let lo_x = probe.data[i];
        let lo = f(&probe);
        probe.data[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::Numeric(format!(
                "fd_gradient: non-finite evaluation at index {}",
                i
            )));
        }
        let step = (hi_x as f64 - lo_x as f64) / 2.0;
        grad.data[i] = ((hi - lo) / (2.0 * step)) as f32;
    }
    Ok(grad)
}

/// Max relative error between two gradients, denominator max(|a|,|b|,1e-8).
pub fn max_rel_err(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let (x, y) = (x as f64, y as f64);
            (x - y).abs() / x.abs().max(y.abs()).max(1e-8)
        })
        .fold(0.0, f64::max)
}

fn dims2(t: &Tensor, what: &str) -> Result<[usize; 2]> {
    match *t.shape() {
        [a, b] => Ok([a, b]),
        _ => Err(Error::Dimension(format!(
            "{}: expected 2-D, got {:?}",
            what,
            t.shape()
        ))),
    }
}
