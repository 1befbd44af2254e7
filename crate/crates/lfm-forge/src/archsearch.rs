//! Architecture selection machinery: budget filtering, Pareto dominance
//! over (quality, decode latency, peak memory), exact 3-D hypervolume and
//! hypervolume-improvement ranking, plus curriculum difficulty scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePoint {
    pub id: String,
    pub quality: f64,
    pub ttft_ms: f64,
    pub decode_ms_p50: f64,
    pub decode_ms_p95: f64,
    pub peak_mem_bytes: f64,
}

impl CandidatePoint {
    pub fn validate(&self) -> Result<()> {
        let metrics = [
            self.quality,
            self.ttft_ms,
            self.decode_ms_p50,
            self.decode_ms_p95,
            self.peak_mem_bytes,
        ];
        if metrics.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::Input(format!(
                "candidate {:?}: metrics must be finite and non-negative",
                self.id
            )));
        }
        Ok(())
    }

    /// Maximization-frame objectives: (quality, -decode p50, -peak memory).
    pub fn objectives(&self) -> [f64; 3] {
        [self.quality, -self.decode_ms_p50, -self.peak_mem_bytes]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub max_ttft_ms: f64,
    pub max_decode_ms: f64,
    pub max_peak_mem_bytes: f64,
}

/// Keeps candidates within every budget; thresholds are inclusive.
pub fn filter_budgets(cands: &[CandidatePoint], budget: &BudgetSpec) -> Vec<CandidatePoint> {
    cands
        .iter()
        .filter(|c| {
            c.ttft_ms <= budget.max_ttft_ms
                && c.decode_ms_p95 <= budget.max_decode_ms
                && c.peak_mem_bytes <= budget.max_peak_mem_bytes
        })
        .cloned()
        .collect()
}

/// a dominates b: at least as good on all three axes, strictly better on one.
pub fn dominates(a: &CandidatePoint, b: &CandidatePoint) -> bool {
    let (pa, pb) = (a.objectives(), b.objectives());
    pa.iter().zip(&pb).all(|(x, y)| x >= y) && pa.iter().zip(&pb).any(|(x, y)| x > y)
}

/// Non-dominated subset under [`dominates`].
pub fn pareto_front(cands: &[CandidatePoint]) -> Vec<CandidatePoint> {
    cands
        .iter()
        .filter(|c| !cands.iter().any(|other| dominates(other, c)))
        .cloned()
        .collect()
}

/// Reference point from the componentwise worst objective values with a 1%
/// margin so every candidate strictly dominates it.
pub fn default_reference(cands: &[CandidatePoint]) -> Result<[f64; 3]> {
    if cands.is_empty() {
        return Err(Error::Input("default_reference: no candidates".into()));
    }
    let mut worst = [f64::INFINITY; 3];
    let mut best = [f64::NEG_INFINITY; 3];
    for c in cands {
        for (k, v) in c.objectives().iter().enumerate() {
            worst[k] = worst[k].min(*v);
            best[k] = best[k].max(*v);
        }
    }
    let mut r = [0.0; 3];
    for k in 0..3 {
        let margin = 0.01 * (best[k] - worst[k]).max(worst[k].abs()).max(1e-9);
        r[k] = worst[k] - margin;
    }
    Ok(r)
}

const MAX_HV_POINTS: usize = 64;

/// Exact dominated 3-D hypervolume in the maximization frame. Every point
/// must weakly dominate the reference point.
pub fn hypervolume(points: &[CandidatePoint], reference: [f64; 3]) -> Result<f64> {
    if points.len() > MAX_HV_POINTS {
        return Err(Error::Input(format!(
            "hypervolume: {} points exceeds the exact-method limit of {}",
            points.len(),
            MAX_HV_POINTS
        )));
    }
    let mut objs = Vec::with_capacity(points.len());
    for p in points {
        let o = p.objectives();
        if o.iter().zip(&reference).any(|(v, r)| v < r) {
            return Err(Error::Input(format!(
                "hypervolume: point {:?} does not dominate the reference",
                p.id
            )));
        }
        objs.push(o);
    }
    Ok(hv3d(&objs, reference))
}

/// Sweep over z slabs; within each slab the dominated region is the union of
/// axis-aligned rectangles anchored at the reference, whose area the x-sorted
/// staircase gives exactly.
fn hv3d(points: &[[f64; 3]], r: [f64; 3]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut zs: Vec<f64> = points.iter().map(|p| p[2]).collect();
    zs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    zs.dedup();
    let mut volume = 0.0;
    for (i, &z_top) in zs.iter().enumerate() {
        let z_bottom = zs.get(i + 1).copied().unwrap_or(r[2]);
        let height = z_top - z_bottom;
        if height <= 0.0 {
            continue;
        }
        let slab: Vec<[f64; 2]> = points
            .iter()
            .filter(|p| p[2] >= z_top)
            .map(|p| [p[0], p[1]])
            .collect();
        volume += height * staircase_area(&slab, [r[0], r[1]]);
    }
    volume
}

fn staircase_area(points: &[[f64; 2]], r: [f64; 2]) -> f64 {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| b[0].partial_cmp(&a[0]).unwrap());
    let mut area = 0.0;
    let mut best_y = r[1];
    for p in pts {
        if p[1] > best_y {
            area += (p[0] - r[0]) * (p[1] - best_y);
            best_y = p[1];
        }
    }
    area
}

/// Hypervolume improvement of each pool candidate over the current front,
/// sorted descending by improvement with ties broken by id.
pub fn rank_by_hvi(
    front: &[CandidatePoint],
    pool: &[CandidatePoint],
    reference: [f64; 3],
) -> Result<Vec<(CandidatePoint, f64)>> {
    let base = hypervolume(front, reference)?;
    let mut ranked = Vec::with_capacity(pool.len());
    for c in pool {
        let mut extended = front.to_vec();
        extended.push(c.clone());
        let hvi = hypervolume(&extended, reference)? - base;
        ranked.push((c.clone(), hvi));
    }
    ranked.sort_by(|(a, ha), (b, hb)| {
        hb.partial_cmp(ha).unwrap().then_with(|| a.id.cmp(&b.id))
    });
    Ok(ranked)
}

/// Binary success outcomes: rows are items, columns are models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumMatrix {
    pub outcomes: Vec<Vec<u8>>,
}

impl CurriculumMatrix {
    pub fn validate(&self) -> Result<()> {
        let j = self.outcomes.first().map(|r| r.len()).unwrap_or(0);
        if j == 0 {
            return Err(Error::Input("curriculum: need at least one model column".into()));
        }
        for row in &self.outcomes {
            if row.len() != j {
                return Err(Error::Input("curriculum: ragged outcome matrix".into()));
            }
            if row.iter().any(|&v| v > 1) {
                return Err(Error::Input("curriculum: outcomes must be 0/1".into()));
            }
        }
        Ok(())
    }
}

/// Empirical success probability per item and the easiest-first ordering
/// (descending p, ties by original index).
pub fn curriculum_order(matrix: &CurriculumMatrix) -> Result<(Vec<f64>, Vec<usize>)> {
    matrix.validate()?;
    let j = matrix.outcomes[0].len() as f64;
    let p: Vec<f64> = matrix
        .outcomes
        .iter()
        .map(|row| row.iter().map(|&v| v as f64).sum::<f64>() / j)
        .collect();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    Ok((p, order))
}
