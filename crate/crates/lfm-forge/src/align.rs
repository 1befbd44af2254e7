//! Length-normalized direct-alignment loss family.
//!
//! The loss over a preference batch is the mean of
//! -[omega * f(Delta - m) + lambda * g(delta)] where Delta compares
//! length-normalized implicit rewards of chosen and rejected responses and
//! delta compares their sigmoids. DPO-LN, APO-zero-LN, and a joint objective
//! are presets over (omega, f, m, lambda, g, beta).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Summed sequence log-probabilities under policy and reference plus
/// response token counts for one (prompt, chosen, rejected) triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub logp_policy_chosen: f64,
    pub logp_policy_rejected: f64,
    pub logp_ref_chosen: f64,
    pub logp_ref_rejected: f64,
    pub len_chosen: usize,
    pub len_rejected: usize,
}

impl PreferenceTriple {
    pub fn validate(&self) -> Result<()> {
        if self.len_chosen == 0 || self.len_rejected == 0 {
            return Err(Error::Input("preference triple: response length 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelativeShape {
    LogSigmoid,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsoluteShape {
    Identity,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    /// Weight of the relative term.
    pub omega: f64,
    pub f_kind: RelativeShape,
    /// Margin applied inside f.
    pub m: f64,
    /// Weight of the absolute term.
    pub lambda: f64,
    pub g_kind: AbsoluteShape,
    /// KL coefficient in the implicit reward.
    pub beta: f64,
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta <= 0.0 {
            return Err(Error::Config(format!("align: beta {} <= 0", self.beta)));
        }
        if !(self.omega.is_finite() && self.lambda.is_finite() && self.m.is_finite()) {
            return Err(Error::Config("align: non-finite weights".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Chosen,
    Rejected,
}

/// r_theta = beta * (log pi_policy - log pi_ref) for the selected response.
pub fn implicit_reward(triple: &PreferenceTriple, which: Which, beta: f64) -> f64 {
    match which {
        Which::Chosen => beta * (triple.logp_policy_chosen - triple.logp_ref_chosen),
        Which::Rejected => beta * (triple.logp_policy_rejected - triple.logp_ref_rejected),
    }
}

/// Per-triple gradient of the batch loss w.r.t. the four log-prob inputs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TripleGrad {
    pub d_logp_policy_chosen: f64,
    pub d_logp_policy_rejected: f64,
    pub d_logp_ref_chosen: f64,
    pub d_logp_ref_rejected: f64,
}

pub fn preset(name: &str) -> Result<AlignConfig> {
    let beta = 5.0;
    match name {
        "dpo_ln" => Ok(AlignConfig {
            omega: 1.0,
            f_kind: RelativeShape::LogSigmoid,
            m: 0.0,
            lambda: 0.0,
            g_kind: AbsoluteShape::Zero,
            beta,
        }),
        "apo_zero_ln" => Ok(AlignConfig {
            omega: 0.0,
            f_kind: RelativeShape::Zero,
            m: 0.0,
            lambda: 1.0,
            g_kind: AbsoluteShape::Identity,
            beta,
        }),
        "joint" => Ok(AlignConfig {
            omega: 1.0,
            f_kind: RelativeShape::LogSigmoid,
            m: 0.1,
            lambda: 0.2,
            g_kind: AbsoluteShape::Identity,
            beta,
        }),
        other => Err(Error::Input(format!("unknown alignment preset {:?}", other))),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Batch loss and analytic per-triple gradients.
pub fn ln_align_loss(
    batch: &[PreferenceTriple],
    config: &AlignConfig,
) -> Result<(f64, Vec<TripleGrad>)> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::Input("ln_align_loss: empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut total = 0.0f64;
    let mut grads = Vec::with_capacity(batch.len());
    for triple in batch {
        triple.validate()?;
        let lw = triple.len_chosen as f64;
        let ll = triple.len_rejected as f64;
        let rw = implicit_reward(triple, Which::Chosen, config.beta) / lw;
        let rl = implicit_reward(triple, Which::Rejected, config.beta) / ll;
        let delta_rel = rw - rl;
        let delta_abs = sigmoid(rw) - sigmoid(rl);

        // f and its derivative at Delta - m
        let (f_val, f_prime) = match config.f_kind {
            RelativeShape::LogSigmoid => {
                let x = delta_rel - config.m;
                (sigmoid(x).ln(), 1.0 - sigmoid(x))
            }
            RelativeShape::Zero => (0.0, 0.0),
        };
        let (g_val, g_prime) = match config.g_kind {
            AbsoluteShape::Identity => (delta_abs, 1.0),
            AbsoluteShape::Zero => (0.0, 0.0),
        };
        total -= config.omega * f_val + config.lambda * g_val;

        // d loss / d r_w and d r_l (normalized rewards)
        let d_rw = -(config.omega * f_prime
            + config.lambda * g_prime * sigmoid(rw) * (1.0 - sigmoid(rw)));
        let d_rl = config.omega * f_prime
            + config.lambda * g_prime * sigmoid(rl) * (1.0 - sigmoid(rl));
        let scale_w = config.beta / lw / n;
        let scale_l = config.beta / ll / n;
        grads.push(TripleGrad {
            d_logp_policy_chosen: d_rw * scale_w,
            d_logp_policy_rejected: d_rl * scale_l,
            d_logp_ref_chosen: -d_rw * scale_w,
            d_logp_ref_rejected: -d_rl * scale_l,
        });
    }
    Ok((total / n, grads))
}
