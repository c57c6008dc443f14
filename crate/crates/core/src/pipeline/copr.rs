//! Pairwise rank-alignment loss between pre-ranking and the ranking stage.

use super::ScoredCandidate;
use crate::error::{AifError, Result};

/// Ranking-stage (teacher) view of a candidate list: 1-based rank and gain
/// per candidate, indexed like the scored list.
#[derive(Debug, Clone, PartialEq)]
pub struct Relevance {
    ranks: Vec<usize>,
    gains: Vec<f64>,
}

impl Relevance {
    pub fn new(ranks: Vec<usize>, gains: Vec<f64>) -> Result<Self> {
        if ranks.len() != gains.len() {
            return Err(AifError::shape("Relevance::new", format!("{} ranks, {} gains", ranks.len(), gains.len())));
        }
        let mut seen = vec![false; ranks.len()];
        for &r in &ranks {
            if r == 0 || r > ranks.len() || std::mem::replace(&mut seen[r - 1], true) {
                return Err(AifError::Contract(format!("ranks must be a permutation of 1..={}", ranks.len())));
            }
        }
        Ok(Self { ranks, gains })
    }

    /// Ranks candidates by descending teacher score (ties by index); the
    /// top `k` get gain 1, the rest 0.
    pub fn top_k(teacher_scores: &[f64], k: usize) -> Self {
        let ranks = ranks_of(teacher_scores);
        let gains = ranks.iter().map(|&r| if r <= k { 1.0 } else { 0.0 }).collect();
        Self { ranks, gains }
    }

    /// Graded gains: rank `r` of `n` gets gain `(n - r + 1) / n`.
    pub fn graded(teacher_scores: &[f64]) -> Self {
        let ranks = ranks_of(teacher_scores);
        let n = ranks.len() as f64;
        let gains = ranks.iter().map(|&r| (n - r as f64 + 1.0) / n).collect();
        Self { ranks, gains }
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    /// Ordered pairs `(i, j)` with `i` ranked above `j` by the teacher.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.len();
        (0..n).flat_map(move |i| (0..n).filter(move |&j| self.ranks[i] < self.ranks[j]).map(move |j| (i, j)))
    }
}

fn ranks_of(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; scores.len()];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos + 1;
    }
    ranks
}

/// `|g_i − g_j| · |1/log₂(1+r_i) − 1/log₂(1+r_j)|`
pub fn delta_ndcg(rel: &Relevance, i: usize, j: usize) -> f64 {
    let disc = |r: usize| 1.0 / (1.0 + r as f64).log2();
    (rel.gains[i] - rel.gains[j]).abs() * (disc(rel.ranks[i]) - disc(rel.ranks[j])).abs()
}

/// `ln(1 + eˣ)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check(y: &[f64], bids: &[f64], rel: &Relevance) -> Result<()> {
    if y.len() != bids.len() || y.len() != rel.len() {
        return Err(AifError::shape(
            "copr_loss",
            format!("{} scores, {} bids, {} relevance entries", y.len(), bids.len(), rel.len()),
        ));
    }
    if let Some(b) = bids.iter().find(|b| !(**b > 0.0)) {
        return Err(AifError::Contract(format!("bid must be positive, got {b}")));
    }
    if let Some(v) = y.iter().find(|v| !(**v > 0.0)) {
        return Err(AifError::Contract(format!("score must be positive, got {v}")));
    }
    Ok(())
}

/// Loss and its gradient with respect to each score.
pub fn copr_loss_with_grad(y: &[f64], bids: &[f64], rel: &Relevance) -> Result<(f64, Vec<f64>)> {
    check(y, bids, rel)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; y.len()];
    for (i, j) in rel.pairs() {
        let g = delta_ndcg(rel, i, j);
        if g == 0.0 {
            continue;
        }
        let r = (y[i] * bids[i]) / (y[j] * bids[j]);
        let z = r - 1.0;
        loss += g * softplus(-z);
        // d softplus(−z)/dz = −σ(−z); dr/dy_i = r/y_i, dr/dy_j = −r/y_j
        let s = g * logistic(-z);
        grad[i] -= s * r / y[i];
        grad[j] += s * r / y[j];
    }
    Ok((loss, grad))
}

/// `Σ ΔNDCG(i,j) · ln(1 + exp(−(y_i·bid_i / (y_j·bid_j) − 1)))` over pairs
/// with `i` ranked above `j` by the teacher. Fewer than two candidates give 0.
pub fn copr_loss_values(y: &[f64], bids: &[f64], rel: &Relevance) -> Result<f64> {
    Ok(copr_loss_with_grad(y, bids, rel)?.0)
}

pub fn copr_loss(scored: &[ScoredCandidate], rel: &Relevance) -> Result<f64> {
    let y: Vec<f64> = scored.iter().map(|c| f64::from(c.score)).collect();
    let bids: Vec<f64> = scored.iter().map(|c| c.bid).collect();
    copr_loss_values(&y, &bids, rel)
}
