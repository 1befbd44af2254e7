//! Decoupled, tempered Top-K knowledge distillation.
//!
//! The teacher distribution is known only on its Top-K set plus one
//! aggregate tail log-sum-exp. The objective splits the forward KL into a
//! Bernoulli membership term on the Top-K mass (untempered) and a tempered
//! conditional KL inside the Top-K set, which stays bounded in the
//! temperature where the naive truncate-then-temper KL diverges as tau^2.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to student probabilities before logs; sets the `clamped`
/// flag rather than failing.
const PROB_FLOOR: f64 = 1e-12;

/// Per-token teacher record: Top-K token ids, their logits, and the
/// log-sum-exp of all remaining logits (so the Top-K mass is exact).
#[derive(Debug, Clone, PartialEq)]
pub struct TopKRecord {
    pub indices: Vec<u32>,
    pub teacher_logits: Vec<f32>,
    pub tail_logsumexp: f32,
    pub vocab_size: usize,
}

impl TopKRecord {
    pub fn new(
        indices: Vec<u32>,
        teacher_logits: Vec<f32>,
        tail_logsumexp: f32,
        vocab_size: usize,
    ) -> Result<Self> {
        if indices.is_empty() || indices.len() != teacher_logits.len() {
            return Err(Error::Input(format!(
                "record: {} indices vs {} logits",
                indices.len(),
                teacher_logits.len()
            )));
        }
        if indices.len() > vocab_size {
            return Err(Error::Input(format!(
                "record: K={} exceeds vocab {}",
                indices.len(),
                vocab_size
            )));
        }
        let mut seen = indices.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != indices.len() {
            return Err(Error::Input("record: duplicate indices".into()));
        }
        if indices.iter().any(|&i| i as usize >= vocab_size) {
            return Err(Error::Input("record: index out of vocab range".into()));
        }
        Ok(Self {
            indices,
            teacher_logits,
            tail_logsumexp,
            vocab_size,
        })
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }

    /// Teacher probability mass on the Top-K set, exact via the stored tail.
    pub fn teacher_topk_mass(&self) -> f64 {
        let lse_top = logsumexp(self.teacher_logits.iter().map(|&v| v as f64));
        let lse_full = logsumexp([lse_top, self.tail_logsumexp as f64].into_iter());
        (lse_top - lse_full).exp()
    }

    /// Teacher conditional over the Top-K set at temperature tau.
    fn teacher_conditional(&self, tau: f64) -> Vec<f64> {
        softmax_scaled(&self.teacher_logits, tau)
    }
}

/// Loss decomposition returned by the Top-K objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtkBreakdown {
    pub binary_term: f64,
    pub conditional_term: f64,
    pub topk_mass_teacher: f64,
    pub topk_mass_student: f64,
    pub total: f64,
    /// True when a student probability was floored at 1e-12 before a log.
    pub clamped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReverseVariant {
    /// Conditional term weighted by the student's Top-K mass (a strict
    /// lower bound of the full reverse KL).
    LowerBound,
    /// Conditional term weighted by the teacher's Top-K mass.
    TeacherWeighted,
}

struct StudentView {
    probs: Vec<f64>,
    topk_mass: f64,
    clamped: bool,
}

fn student_view(student_logits: &Tensor, record: &TopKRecord) -> Result<StudentView> {
    if student_logits.len() != record.vocab_size {
        return Err(Error::Input(format!(
            "student logits length {} != vocab {}",
            student_logits.len(),
            record.vocab_size
        )));
    }
    let probs = softmax_f64(student_logits.data());
    let mut clamped = false;
    let raw_mass: f64 = record.indices.iter().map(|&i| probs[i as usize]).sum();
    let mut mass = raw_mass;
    if mass < PROB_FLOOR {
        mass = PROB_FLOOR;
        clamped = true;
    }
    if mass > 1.0 - PROB_FLOOR {
        mass = 1.0 - PROB_FLOOR;
        clamped = true;
    }
    if record.indices.iter().any(|&i| probs[i as usize] < PROB_FLOOR) {
        clamped = true;
    }
    Ok(StudentView {
        probs,
        topk_mass: mass,
        clamped,
    })
}

/// Decoupled tempered Top-K loss with its analytic gradient w.r.t. every
/// student logit. The gradient reaches out-of-set logits only through the
/// student's Top-K mass.
pub fn dtk_loss(
    student_logits: &Tensor,
    record: &TopKRecord,
    tau: f64,
) -> Result<(DtkBreakdown, Tensor)> {
    if tau < 1.0 {
        return Err(Error::Config(format!("dtk_loss: tau {} < 1", tau)));
    }
    let view = student_view(student_logits, record)?;
    let a = record.teacher_topk_mass();
    let b = view.topk_mass;

    let binary = bernoulli_kl(a, b);
    let teacher_cond = record.teacher_conditional(tau);
    let student_logits_topk: Vec<f32> = record
        .indices
        .iter()
        .map(|&i| student_logits.data()[i as usize])
        .collect();
    let student_cond = softmax_scaled(&student_logits_topk, tau);
    let inner: f64 = teacher_cond
        .iter()
        .zip(&student_cond)
        .map(|(&p, &q)| {
            if p == 0.0 {
                0.0
            } else {
                p * (p.ln() - q.max(PROB_FLOOR).ln())
            }
        })
        .sum();
    let conditional = a * tau * tau * inner;

    let mut grad = vec![0.0f64; record.vocab_size];
    // d L_B / d b, chained through d b / d z_j = s_j (1[j in T] - b)
    let dlb_db = -a / b + (1.0 - a) / (1.0 - b);
    let in_topk = membership(record);
    for (j, g) in grad.iter_mut().enumerate() {
        let ind = if in_topk[j] { 1.0 } else { 0.0 };
        *g = dlb_db * view.probs[j] * (ind - b);
    }
    for (slot, &j) in record.indices.iter().enumerate() {
        grad[j as usize] += a * tau * (student_cond[slot] - teacher_cond[slot]);
    }

    let breakdown = DtkBreakdown {
        binary_term: binary,
        conditional_term: conditional,
        topk_mass_teacher: a,
        topk_mass_student: b,
        total: binary + conditional,
        clamped: view.clamped,
    };
    Ok((breakdown, grad_tensor(grad)))
}

/// Forward KL over the full vocabulary; the oracle for the chain-rule
/// identity and the lower-bound property. Returns +infinity when the
/// student assigns zero probability where the teacher does not.
pub fn full_forward_kl(teacher_probs: &Tensor, student_logits: &Tensor) -> Result<f64> {
    if teacher_probs.len() != student_logits.len() {
        return Err(Error::Input(format!(
            "full_forward_kl: {} teacher probs vs {} logits",
            teacher_probs.len(),
            student_logits.len()
        )));
    }
    let sum: f64 = teacher_probs.data().iter().map(|&p| p as f64).sum();
    if (sum - 1.0).abs() > 1e-4 || teacher_probs.data().iter().any(|&p| p < 0.0) {
        return Err(Error::Input("full_forward_kl: teacher is not a distribution".into()));
    }
    let s = softmax_f64(student_logits.data());
    let mut kl = 0.0f64;
    for (&p, &q) in teacher_probs.data().iter().zip(&s) {
        let p = p as f64;
        if p == 0.0 {
            continue;
        }
        if q == 0.0 {
            return Ok(f64::INFINITY);
        }
        kl += p * (p.ln() - q.ln());
    }
    Ok(kl)
}

/// The unstable baseline: truncate the teacher to its Top-K set, renormalize,
/// apply temperature over the full vocabulary, and return the tau^2-scaled
/// KL against the tempered student. Grows as tau^2 * log(|A|/K).
pub fn naive_truncated_tempered_kl(
    record: &TopKRecord,
    student_logits: &Tensor,
    tau: f64,
) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::Config("naive kl: tau must be positive".into()));
    }
    if student_logits.len() != record.vocab_size {
        return Err(Error::Input(format!(
            "student logits length {} != vocab {}",
            student_logits.len(),
            record.vocab_size
        )));
    }
    // tempering the truncated teacher keeps its support on the Top-K set
    let teacher_t = record.teacher_conditional(tau);
    let student_t = softmax_scaled(student_logits.data(), tau);
    let inner: f64 = record
        .indices
        .iter()
        .zip(&teacher_t)
        .map(|(&j, &p)| {
            if p == 0.0 {
                0.0
            } else {
                p * (p.ln() - student_t[j as usize].max(PROB_FLOOR).ln())
            }
        })
        .sum();
    Ok(tau * tau * inner)
}

/// Reverse-KL counterpart of [`dtk_loss`]: Bernoulli term with the student
/// first, tempered conditional KL with the student first, weighted by the
/// student mass (lower bound) or teacher mass (teacher-weighted surrogate).
pub fn reverse_dtk_loss(
    student_logits: &Tensor,
    record: &TopKRecord,
    tau: f64,
    variant: ReverseVariant,
) -> Result<(DtkBreakdown, Tensor)> {
    if tau < 1.0 {
        return Err(Error::Config(format!("reverse_dtk_loss: tau {} < 1", tau)));
    }
    let view = student_view(student_logits, record)?;
    let a = record.teacher_topk_mass();
    let b = view.topk_mass;

    let binary = bernoulli_kl(b, a);
    let teacher_cond = record.teacher_conditional(tau);
    let student_logits_topk: Vec<f32> = record
        .indices
        .iter()
        .map(|&i| student_logits.data()[i as usize])
        .collect();
    let student_cond = softmax_scaled(&student_logits_topk, tau);
    let diffs: Vec<f64> = student_cond
        .iter()
        .zip(&teacher_cond)
        .map(|(&q, &p)| q.max(PROB_FLOOR).ln() - p.max(PROB_FLOOR).ln())
        .collect();
    let inner: f64 = student_cond.iter().zip(&diffs).map(|(&q, &d)| q * d).sum();
    let weight = match variant {
        ReverseVariant::LowerBound => b,
        ReverseVariant::TeacherWeighted => a,
    };
    let conditional = weight * tau * tau * inner;

    let mut grad = vec![0.0f64; record.vocab_size];
    let in_topk = membership(record);
    // d/db of b ln(b/a) + (1-b) ln((1-b)/(1-a))
    let mut db_coeff = (b / a).ln() - ((1.0 - b) / (1.0 - a)).ln();
    if matches!(variant, ReverseVariant::LowerBound) {
        db_coeff += tau * tau * inner;
    }
    for (j, g) in grad.iter_mut().enumerate() {
        let ind = if in_topk[j] { 1.0 } else { 0.0 };
        *g = db_coeff * view.probs[j] * (ind - b);
    }
    for (slot, &j) in record.indices.iter().enumerate() {
        grad[j as usize] += weight * tau * student_cond[slot] * (diffs[slot] - inner);
    }

    let breakdown = DtkBreakdown {
        binary_term: binary,
        conditional_term: conditional,
        topk_mass_teacher: a,
        topk_mass_student: b,
        total: binary + conditional,
        clamped: view.clamped,
    };
    Ok((breakdown, grad_tensor(grad)))
}

/// Mean over positions of alpha * L_DTK + (1 - alpha) * cross-entropy on the
/// hard label, with the gradient w.r.t. all student logits.
pub fn kd_training_loss(
    student_logits: &Tensor,
    records: &[TopKRecord],
    hard_labels: &[u32],
    tau: f64,
    alpha: f64,
) -> Result<(f64, Tensor)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("kd loss: alpha {} not in [0,1]", alpha)));
    }
    let [l, vocab] = match *student_logits.shape() {
        [l, v] => [l, v],
        _ => {
            return Err(Error::Dimension(format!(
                "kd loss: expected [L,vocab] logits, got {:?}",
                student_logits.shape()
            )))
        }
    };
    if records.len() != l || hard_labels.len() != l {
        return Err(Error::Input(format!(
            "kd loss: {} positions vs {} records / {} labels",
            l,
            records.len(),
            hard_labels.len()
        )));
    }
    let mut total = 0.0f64;
    let mut grad = vec![0.0f32; l * vocab];
    for pos in 0..l {
        let label = hard_labels[pos];
        if label as usize >= vocab {
            return Err(Error::Input(format!(
                "kd loss: label {} out of range at position {}",
                label, pos
            )));
        }
        let row = Tensor::new(
            vec![vocab],
            student_logits.data()[pos * vocab..(pos + 1) * vocab].to_vec(),
        )?;
        let (breakdown, dtk_grad) = dtk_loss(&row, &records[pos], tau)?;
        let probs = softmax_f64(row.data());
        let ce = -probs[label as usize].max(PROB_FLOOR).ln();
        total += alpha * breakdown.total + (1.0 - alpha) * ce;
        for j in 0..vocab {
            let one_hot = if j == label as usize { 1.0 } else { 0.0 };
            let ce_grad = probs[j] - one_hot;
            grad[pos * vocab + j] = ((alpha * dtk_grad.data()[j] as f64
                + (1.0 - alpha) * ce_grad)
                / l as f64) as f32;
        }
    }
    Ok((
        total / l as f64,
        Tensor::new(vec![l, vocab], grad)?,
    ))
}

// ---- TKD1 container ----
//
// magic "TKD1"; u32 vocab_size, u16 K, u64 n_positions; per position:
// K x u32 indices, K x f32 logits, f32 tail logsumexp. Little-endian.

const TKD_MAGIC: &[u8; 4] = b"TKD1";

pub fn write_tkd1<W: Write>(records: &[TopKRecord], mut w: W) -> Result<()> {
    let first = records
        .first()
        .ok_or_else(|| Error::Input("TKD1: no records".into()))?;
    let (vocab, k) = (first.vocab_size, first.k());
    if records.iter().any(|r| r.vocab_size != vocab || r.k() != k) {
        return Err(Error::Input("TKD1: records disagree on vocab or K".into()));
    }
    w.write_all(TKD_MAGIC)?;
    w.write_all(&(vocab as u32).to_le_bytes())?;
    w.write_all(&(k as u16).to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        for &i in &r.indices {
            w.write_all(&i.to_le_bytes())?;
        }
        for &v in &r.teacher_logits {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&r.tail_logsumexp.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tkd1<R: Read>(mut r: R) -> Result<Vec<TopKRecord>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TKD_MAGIC {
        return Err(Error::Parse(format!("bad TKD1 magic {:?}", magic)));
    }
    let mut b4 = [0u8; 4];
    let mut b2 = [0u8; 2];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let vocab = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b2)?;
    let k = u16::from_le_bytes(b2) as usize;
    r.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let mut indices = Vec::with_capacity(k);
        for _ in 0..k {
            r.read_exact(&mut b4)?;
            indices.push(u32::from_le_bytes(b4));
        }
        let mut logits = Vec::with_capacity(k);
        for _ in 0..k {
            r.read_exact(&mut b4)?;
            logits.push(f32::from_le_bytes(b4));
        }
        r.read_exact(&mut b4)?;
        let tail = f32::from_le_bytes(b4);
        records.push(TopKRecord::new(indices, logits, tail, vocab)?);
    }
    Ok(records)
}

fn grad_tensor(grad: Vec<f64>) -> Tensor {
    Tensor::from_vec(grad.into_iter().map(|v| v as f32).collect())
}

fn membership(record: &TopKRecord) -> Vec<bool> {
    let mut m = vec![false; record.vocab_size];
    for &i in &record.indices {
        m[i as usize] = true;
    }
    m
}

fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let term = |p: f64, q: f64| {
        if p == 0.0 {
            0.0
        } else {
            p * (p.ln() - q.max(PROB_FLOOR).ln())
        }
    };
    term(p, q) + term(1.0 - p, 1.0 - q)
}

fn logsumexp(values: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = values.collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    softmax_scaled(logits, 1.0)
}

/// softmax(logits / tau) in f64.
fn softmax_scaled(logits: &[f32], tau: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| ((v as f64 - max) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
