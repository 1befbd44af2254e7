//! Late-interaction retrieval: token-level encoding through the backbone
//! plus a bias-free projection, MaxSim scoring, and the MSE score
//! distillation loss with min-max teacher normalization.

use crate::backbone::Model;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const QUERY_TOKEN_CAP: usize = 32;
pub const DOC_TOKEN_CAP: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Query,
    Document,
}

impl Role {
    pub fn token_cap(self) -> usize {
        match self {
            Role::Query => QUERY_TOKEN_CAP,
            Role::Document => DOC_TOKEN_CAP,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TokenEmbeddings {
    pub vectors: Tensor,
    pub role: Role,
    /// Set when the input exceeded the role's token cap and was cut off.
    pub truncated: bool,
}

impl TokenEmbeddings {
    /// Wraps pre-computed vectors, enforcing the cap and unit norms.
    pub fn new(vectors: Tensor, role: Role) -> Result<Self> {
        if vectors.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "token embeddings must be [n, dim], got {:?}",
                vectors.shape()
            )));
        }
        let n = vectors.shape()[0];
        if n == 0 {
            return Err(Error::Input("empty token embedding set".into()));
        }
        if n > role.token_cap() {
            return Err(Error::Capacity(format!(
                "{} tokens exceeds cap {}",
                n,
                role.token_cap()
            )));
        }
        let dim = vectors.shape()[1];
        for (i, row) in vectors.data().chunks(dim).enumerate() {
            let norm: f64 = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::Domain(format!(
                    "token vector {} has norm {:.6}, expected 1",
                    i, norm
                )));
            }
        }
        Ok(Self {
            vectors,
            role,
            truncated: false,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.vectors.shape()[0]
    }
}

/// Encodes token ids through the backbone's final hidden states, projects
/// them without bias, and L2-normalizes each row. Inputs over the role cap
/// are truncated and flagged.
pub fn encode(
    model: &Model,
    projection: &Tensor,
    tokens: &[u32],
    role: Role,
) -> Result<TokenEmbeddings> {
    if tokens.is_empty() {
        return Err(Error::Input("cannot encode an empty token sequence".into()));
    }
    let d = model.config().d_model;
    if projection.shape().len() != 2 || projection.shape()[0] != d {
        return Err(Error::Dimension(format!(
            "projection must be [{}, proj_dim], got {:?}",
            d,
            projection.shape()
        )));
    }
    let cap = role.token_cap();
    let truncated = tokens.len() > cap;
    let tokens = &tokens[..tokens.len().min(cap)];

    let hidden = final_hidden_states(model, tokens)?;
    let proj_dim = projection.shape()[1];
    let projected = crate::tensor::matmul(&hidden, projection)?;
    let mut data = projected.data().to_vec();
    for row in data.chunks_mut(proj_dim) {
        let norm: f64 = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Degenerate("zero-vector token embedding".into()));
        }
        for v in row.iter_mut() {
            *v = (*v as f64 / norm) as f32;
        }
    }
    let mut emb = TokenEmbeddings::new(Tensor::new(vec![tokens.len(), proj_dim], data)?, role)?;
    emb.truncated = truncated;
    Ok(emb)
}

/// Final-norm hidden states [L, d] for a token sequence, without the head.
fn final_hidden_states(model: &Model, tokens: &[u32]) -> Result<Tensor> {
    // run the regular forward but recover pre-head activations by
    // re-normalizing per token: the model exposes logits only, so we rebuild
    // the hidden state path here via a dedicated session walk.
    model.hidden_states(tokens)
}

/// S(q, d) = sum over query tokens of the max similarity over doc tokens.
/// Vectors are unit-norm, so dot product equals cosine similarity.
pub fn maxsim_score(q: &TokenEmbeddings, d: &TokenEmbeddings) -> Result<f64> {
    if q.role != Role::Query || d.role != Role::Document {
        return Err(Error::Input("maxsim expects (query, document) roles".into()));
    }
    let dim = q.vectors.shape()[1];
    if dim != d.vectors.shape()[1] {
        return Err(Error::Dimension(format!(
            "projection dims differ: {} vs {}",
            dim,
            d.vectors.shape()[1]
        )));
    }
    let mut total = 0.0f64;
    for qrow in q.vectors.data().chunks(dim) {
        let mut best = f64::NEG_INFINITY;
        for drow in d.vectors.data().chunks(dim) {
            let sim: f64 = qrow.iter().zip(drow).map(|(a, b)| *a as f64 * *b as f64).sum();
            best = best.max(sim);
        }
        total += best;
    }
    Ok(total)
}

/// (s - min) / (max - min); requires a non-constant input.
pub fn minmax_normalize(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.len() < 2 {
        return Err(Error::Input("need at least 2 scores to normalize".into()));
    }
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        return Err(Error::Degenerate("constant scores cannot be normalized".into()));
    }
    Ok(scores.iter().map(|s| (s - min) / (max - min)).collect())
}

#[derive(Debug, Clone)]
pub struct ScoredCandidates {
    pub teacher_scores: Vec<f64>,
    pub student_scores: Vec<f64>,
}

/// Mean squared error between normalized teacher scores and student scores,
/// with its gradient -(2/m)(s_T - S) w.r.t. the student scores.
pub fn distill_mse_loss(cands: &ScoredCandidates) -> Result<(f64, Vec<f64>)> {
    let m = cands.teacher_scores.len();
    if m != cands.student_scores.len() {
        return Err(Error::Input(format!(
            "{} teacher scores vs {} student scores",
            m,
            cands.student_scores.len()
        )));
    }
    if m == 0 {
        return Err(Error::Input("no candidates".into()));
    }
    let mut loss = 0.0f64;
    let mut grad = Vec::with_capacity(m);
    for (t, s) in cands.teacher_scores.iter().zip(&cands.student_scores) {
        let diff = t - s;
        loss += diff * diff;
        grad.push(-2.0 * diff / m as f64);
    }
    Ok((loss / m as f64, grad))
}
