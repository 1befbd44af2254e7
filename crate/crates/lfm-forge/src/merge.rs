//! Parameter-space model merging: model soup, task arithmetic, TIES,
//! DARE (linear and TIES-consensus modes), and DELLA.
//!
//! All methods operate tensor-by-tensor over named checkpoints. Stochastic
//! methods split their RNG stream per (tensor name, model index) so parallel
//! and serial execution produce identical results.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{RngSeed, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Soup,
    TaskArithmetic,
    Ties,
    DareLinear,
    DareTies,
    Della,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeSpec {
    pub method: MergeMethod,
    pub weights: Vec<f32>,
    /// TIES density: fraction of entries kept per task vector.
    #[serde(default = "default_k_pct")]
    pub k_pct: f64,
    /// DARE/DELLA drop rate.
    #[serde(default)]
    pub drop_rate: f64,
    /// DELLA spread of drop probabilities across magnitude ranks.
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_k_pct() -> f64 {
    1.0
}

/// Weighted average of corresponding parameters; weights are normalized to
/// sum to one.
pub fn soup(models: &[Checkpoint], weights: &[f32]) -> Result<Checkpoint> {
    if models.is_empty() || models.len() != weights.len() {
        return Err(Error::Input(format!(
            "soup: {} models vs {} weights",
            models.len(),
            weights.len()
        )));
    }
    check_all_compatible(&models[0], models)?;
    let total: f64 = weights.iter().map(|w| *w as f64).sum();
    if total == 0.0 {
        return Err(Error::Input("soup: weights sum to zero".into()));
    }
    let norm: Vec<f64> = weights.iter().map(|w| *w as f64 / total).collect();
    map_tensors(&models[0], |name, t| {
        let mut out = vec![0.0f64; t.len()];
        for (model, w) in models.iter().zip(&norm) {
            for (o, v) in out.iter_mut().zip(model.get(name).unwrap().data()) {
                *o += w * *v as f64;
            }
        }
        Tensor::new(t.shape().to_vec(), out.into_iter().map(|v| v as f32).collect())
    })
}

/// theta_0 + sum_i w_i * (theta_i - theta_0).
pub fn task_arithmetic(
    base: &Checkpoint,
    models: &[Checkpoint],
    weights: &[f32],
) -> Result<Checkpoint> {
    let tvs = task_vectors(base, models, weights)?;
    combine(base, |name, _| {
        let vecs = tvs(name);
        Ok(linear_delta(&vecs, weights))
    })
}

/// TIES: per-tensor magnitude trim to the top ceil(k_pct * n) entries of
/// each task vector, per-coordinate sign election over the unweighted sum,
/// then weighted averaging of sign-agreeing entries.
pub fn ties(
    base: &Checkpoint,
    models: &[Checkpoint],
    weights: &[f32],
    k_pct: f64,
) -> Result<Checkpoint> {
    if !(k_pct > 0.0 && k_pct <= 1.0) {
        return Err(Error::Config(format!("ties: k_pct {} not in (0,1]", k_pct)));
    }
    let tvs = task_vectors(base, models, weights)?;
    combine(base, |name, _| {
        let trimmed: Vec<Vec<f32>> = tvs(name).into_iter().map(|tv| trim_top_k(tv, k_pct)).collect();
        Ok(elect_and_merge(&trimmed, weights))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DareMode {
    Linear,
    TiesConsensus,
}

/// DARE: Bernoulli(p) drop of task-vector entries with 1/(1-p) rescale of
/// survivors, combined linearly or with the TIES elect/merge steps.
pub fn dare(
    base: &Checkpoint,
    models: &[Checkpoint],
    weights: &[f32],
    p: f64,
    mode: DareMode,
    seed: RngSeed,
) -> Result<Checkpoint> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dare: drop rate {} not in [0,1)", p)));
    }
    let tvs = task_vectors(base, models, weights)?;
    combine(base, |name, _| {
        let sparsified: Vec<Vec<f32>> = tvs(name)
            .into_iter()
            .enumerate()
            .map(|(i, mut tv)| {
                let mut rng = seed.for_name(&format!("{}#{}", name, i));
                let scale = (1.0 / (1.0 - p)) as f32;
                for v in tv.iter_mut() {
                    if rng.gen::<f64>() < p {
                        *v = 0.0;
                    } else {
                        *v *= scale;
                    }
                }
                tv
            })
            .collect();
        Ok(match mode {
            DareMode::Linear => linear_delta(&sparsified, weights),
            DareMode::TiesConsensus => elect_and_merge(&sparsified, weights),
        })
    })
}

/// Per-entry drop probabilities for DELLA over `n` entries ranked by
/// descending magnitude: p_i = (p - eps/2) + (eps/n) * rank.
pub fn della_drop_probs(n: usize, p: f64, eps: f64) -> Vec<f64> {
    (0..n).map(|r| (p - eps / 2.0) + eps * r as f64 / n as f64).collect()
}

/// DELLA: magnitude-rank-dependent drop probabilities with per-entry
/// 1/(1-p_i) rescale, then TIES-style sign election and disjoint merge.
pub fn della(
    base: &Checkpoint,
    models: &[Checkpoint],
    weights: &[f32],
    p: f64,
    eps: f64,
    seed: RngSeed,
) -> Result<Checkpoint> {
    if p - eps / 2.0 < 0.0 || p + eps / 2.0 >= 1.0 {
        return Err(Error::Config(format!(
            "della: need 0 <= p - eps/2 and p + eps/2 < 1, got p={} eps={}",
            p, eps
        )));
    }
    let tvs = task_vectors(base, models, weights)?;
    combine(base, |name, _| {
        let sparsified: Vec<Vec<f32>> = tvs(name)
            .into_iter()
            .enumerate()
            .map(|(i, mut tv)| {
                let n = tv.len();
                let probs = della_drop_probs(n, p, eps);
                // rank 0 = largest magnitude, ties broken by lower index
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| {
                    tv[b].abs().partial_cmp(&tv[a].abs()).unwrap().then(a.cmp(&b))
                });
                let mut rng = seed.for_name(&format!("{}#{}", name, i));
                for (rank, &idx) in order.iter().enumerate() {
                    let p_i = probs[rank];
                    if rng.gen::<f64>() < p_i {
                        tv[idx] = 0.0;
                    } else {
                        tv[idx] = (tv[idx] as f64 / (1.0 - p_i)) as f32;
                    }
                }
                tv
            })
            .collect();
        Ok(elect_and_merge(&sparsified, weights))
    })
}

/// Dispatch a [`MergeSpec`] over loaded checkpoints. `base` is required for
/// every method except soup.
pub fn run_merge(
    spec: &MergeSpec,
    base: Option<&Checkpoint>,
    models: &[Checkpoint],
) -> Result<Checkpoint> {
    let need_base = || base.ok_or_else(|| Error::Input("merge method requires a base checkpoint".into()));
    match spec.method {
        MergeMethod::Soup => soup(models, &spec.weights),
        MergeMethod::TaskArithmetic => task_arithmetic(need_base()?, models, &spec.weights),
        MergeMethod::Ties => ties(need_base()?, models, &spec.weights, spec.k_pct),
        MergeMethod::DareLinear => dare(
            need_base()?,
            models,
            &spec.weights,
            spec.drop_rate,
            DareMode::Linear,
            RngSeed(spec.seed),
        ),
        MergeMethod::DareTies => dare(
            need_base()?,
            models,
            &spec.weights,
            spec.drop_rate,
            DareMode::TiesConsensus,
            RngSeed(spec.seed),
        ),
        MergeMethod::Della => della(
            need_base()?,
            models,
            &spec.weights,
            spec.drop_rate,
            spec.epsilon,
            RngSeed(spec.seed),
        ),
    }
}

fn check_all_compatible(reference: &Checkpoint, models: &[Checkpoint]) -> Result<()> {
    for m in models {
        reference.check_compatible(m)?;
    }
    Ok(())
}

/// Validates inputs and returns a per-tensor task-vector extractor.
fn task_vectors<'a>(
    base: &'a Checkpoint,
    models: &'a [Checkpoint],
    weights: &[f32],
) -> Result<impl Fn(&str) -> Vec<Vec<f32>> + Sync + 'a> {
    if models.is_empty() || models.len() != weights.len() {
        return Err(Error::Input(format!(
            "merge: {} models vs {} weights",
            models.len(),
            weights.len()
        )));
    }
    check_all_compatible(base, models)?;
    Ok(move |name: &str| {
        let b = base.get(name).unwrap().data();
        models
            .iter()
            .map(|m| {
                m.get(name)
                    .unwrap()
                    .data()
                    .iter()
                    .zip(b)
                    .map(|(v, bv)| v - bv)
                    .collect()
            })
            .collect()
    })
}

/// theta_0 plus a per-tensor delta computed by `delta_fn`, parallel over tensors.
fn combine<F>(base: &Checkpoint, delta_fn: F) -> Result<Checkpoint>
where
    F: Fn(&str, &Tensor) -> Result<Vec<f32>> + Sync,
{
    map_tensors(base, |name, t| {
        let delta = delta_fn(name, t)?;
        let data = t.data().iter().zip(&delta).map(|(b, d)| b + d).collect();
        Tensor::new(t.shape().to_vec(), data)
    })
}

fn map_tensors<F>(template: &Checkpoint, f: F) -> Result<Checkpoint>
where
    F: Fn(&str, &Tensor) -> Result<Tensor> + Sync,
{
    let merged: Result<Vec<(String, Tensor)>> = template
        .iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(name, t)| Ok((name.to_string(), f(name, t)?)))
        .collect();
    let mut out = Checkpoint::new();
    for (name, t) in merged? {
        out.insert(name, t);
    }
    Ok(out)
}

fn linear_delta(tvs: &[Vec<f32>], weights: &[f32]) -> Vec<f32> {
    let n = tvs[0].len();
    let mut out = vec![0.0f32; n];
    for (tv, &w) in tvs.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(tv) {
            *o += w * v;
        }
    }
    out
}

/// Zero all but the top ceil(k_pct * n) entries by absolute value; magnitude
/// ties broken by lower index.
fn trim_top_k(tv: Vec<f32>, k_pct: f64) -> Vec<f32> {
    let n = tv.len();
    let keep = ((k_pct * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| tv[b].abs().partial_cmp(&tv[a].abs()).unwrap().then(a.cmp(&b)));
    let mut out = vec![0.0f32; n];
    for &idx in order.iter().take(keep) {
        out[idx] = tv[idx];
    }
    out
}

/// TIES sign election and disjoint merge. The elected sign comes from the
/// unweighted coordinate sum; a zero net vote takes sign +. Entries whose
/// sign disagrees (or which are zero) cast no weight.
fn elect_and_merge(tvs: &[Vec<f32>], weights: &[f32]) -> Vec<f32> {
    let n = tvs[0].len();
    let mut out = vec![0.0f32; n];
    for j in 0..n {
        let vote: f64 = tvs.iter().map(|tv| tv[j] as f64).sum();
        let elected = if vote < 0.0 { -1.0f32 } else { 1.0 };
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (tv, &w) in tvs.iter().zip(weights) {
            let v = tv[j];
            if v != 0.0 && v.signum() == elected {
                num += w as f64 * v as f64;
                den += w as f64;
            }
        }
        if den != 0.0 {
            out[j] = (num / den) as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cp(data: &[f32]) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("w", Tensor::from_vec(data.to_vec()));
        c
    }

    #[test]
    fn soup_identities() {
        let a = cp(&[1.0, 2.0]);
        let merged = soup(&[a.clone(), a.clone()], &[0.5, 0.5]).unwrap();
        assert_eq!(merged, a);
        let merged = soup(&[a.clone()], &[0.3]).unwrap();
        assert_eq!(merged, a);
    }

    #[test]
    fn soup_hand_average() {
        let merged = soup(&[cp(&[0.0, 2.0]), cp(&[4.0, 0.0])], &[0.25, 0.75]).unwrap();
        assert_eq!(merged.get("w").unwrap().data(), &[3.0, 0.5]);
    }

    #[test]
    fn task_arithmetic_identities_and_hand_case() {
        let base = cp(&[1.0, 1.0]);
        let m1 = cp(&[2.0, 0.0]);
        let m2 = cp(&[0.0, 3.0]);
        assert_eq!(task_arithmetic(&base, &[m1.clone()], &[1.0]).unwrap(), m1);
        assert_eq!(
            task_arithmetic(&base, &[base.clone(), base.clone()], &[0.4, 0.6]).unwrap(),
            base
        );
        let merged = task_arithmetic(&base, &[m1, m2], &[1.0, 0.5]).unwrap();
        assert_eq!(merged.get("w").unwrap().data(), &[1.5, 1.0]);
    }

    #[test]
    fn ties_hand_example() {
        let base = cp(&[0.0; 4]);
        let m1 = cp(&[2.0, -1.0, 0.5, 0.0]);
        let m2 = cp(&[-1.5, -2.0, 1.0, 0.2]);
        let merged = ties(&base, &[m1, m2], &[1.0, 1.0], 0.5).unwrap();
        assert_eq!(merged.get("w").unwrap().data(), &[2.0, -1.5, 0.0, 0.0]);
    }

    #[test]
    fn ties_single_model_full_density_is_task_arithmetic() {
        let base = cp(&[1.0, -2.0, 3.0]);
        let m1 = cp(&[0.5, 4.0, 3.0]);
        let t = ties(&base, &[m1.clone()], &[1.0], 1.0).unwrap();
        let ta = task_arithmetic(&base, &[m1], &[1.0]).unwrap();
        assert_eq!(t, ta);
    }

    #[test]
    fn ties_unanimous_vectors() {
        let base = cp(&[0.0, 0.0, 0.0]);
        let m = cp(&[1.0, -2.0, 0.5]);
        let merged = ties(&base, &[m.clone(), m.clone()], &[1.0, 1.0], 1.0).unwrap();
        assert_eq!(merged, m);
    }

    #[test]
    fn dare_p_zero_equals_task_arithmetic_bitwise() {
        let base = cp(&[1.0, 2.0, 3.0]);
        let m1 = cp(&[1.5, -0.5, 3.0]);
        let d = dare(&base, &[m1.clone()], &[0.7], 0.0, DareMode::Linear, RngSeed(1)).unwrap();
        let ta = task_arithmetic(&base, &[m1], &[0.7]).unwrap();
        for (a, b) in d.get("w").unwrap().data().iter().zip(ta.get("w").unwrap().data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn dare_is_deterministic_under_seed() {
        let base = cp(&[0.0; 8]);
        let m = cp(&[1.0, -1.0, 2.0, -2.0, 3.0, -3.0, 4.0, -4.0]);
        let a = dare(&base, &[m.clone()], &[1.0], 0.5, DareMode::Linear, RngSeed(9)).unwrap();
        let b = dare(&base, &[m], &[1.0], 0.5, DareMode::Linear, RngSeed(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dare_expectation_preserved_single_scalar() {
        let base = cp(&[0.0]);
        let m = cp(&[1.0]);
        let n = 100_000u64;
        let mut sum = 0.0f64;
        for s in 0..n {
            let merged = dare(&base, &[m.clone()], &[1.0], 0.9, DareMode::Linear, RngSeed(s)).unwrap();
            let v = merged.get("w").unwrap().data()[0];
            assert!(v == 0.0 || (v - 10.0).abs() < 1e-5);
            sum += v as f64;
        }
        let mean = sum / n as f64;
        // Bernoulli(0.1) * 10: sd = 3, se = 3/sqrt(n)
        let se = 3.0 / (n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {} off", mean);
    }

    #[test]
    fn della_prob_sequence() {
        let probs = della_drop_probs(4, 0.5, 0.4);
        let want = [0.3, 0.4, 0.5, 0.6];
        for (p, w) in probs.iter().zip(want) {
            assert!((p - w).abs() < 1e-12);
        }
        let n = 10_000;
        let mean: f64 = della_drop_probs(n, 0.5, 0.4).iter().sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 1e-4);
    }

    #[test]
    fn della_eps_zero_matches_dare_ties() {
        let base = cp(&[0.0; 6]);
        let m = cp(&[3.0, -2.0, 1.0, 0.5, -0.25, 4.0]);
        let d = della(&base, &[m.clone()], &[1.0], 0.4, 0.0, RngSeed(5)).unwrap();
        for v in d.get("w").unwrap().data() {
            assert!(v.is_finite());
        }
        // with eps=0 every entry has drop prob exactly p
        let probs = della_drop_probs(6, 0.4, 0.0);
        assert!(probs.iter().all(|p| (*p - 0.4).abs() < 1e-12));
    }

    #[test]
    fn della_range_validation() {
        let base = cp(&[0.0]);
        let m = cp(&[1.0]);
        assert!(della(&base, &[m.clone()], &[1.0], 0.1, 0.4, RngSeed(0)).is_err());
        assert!(della(&base, &[m], &[1.0], 0.9, 0.3, RngSeed(0)).is_err());
    }

    #[test]
    fn incompatible_checkpoints_rejected() {
        let mut a = Checkpoint::new();
        a.insert("w", Tensor::from_vec(vec![1.0]));
        let mut b = Checkpoint::new();
        b.insert("v", Tensor::from_vec(vec![1.0]));
        assert!(soup(&[a, b], &[0.5, 0.5]).is_err());
    }
}
