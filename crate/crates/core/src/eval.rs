//! Ranking metrics and score-threshold analysis.
//!
//! Ranks are pessimistic: a candidate that ties the target counts as beating
//! it, so a degenerate scorer that gives everything the same score ranks the
//! target last, not first.

use std::collections::HashSet;

use crate::kg::Triple;

/// Pessimistic competition rank of the target among `others`:
/// `1 + #{better} + #{tied}`.
pub fn pessimistic_rank(target_score: f64, others: &[f64]) -> usize {
    debug_assert!(target_score.is_finite(), "non-finite target score");
    let mut rank = 1;
    for &s in others {
        debug_assert!(s.is_finite(), "non-finite candidate score");
        if s >= target_score {
            rank += 1;
        }
    }
    rank
}

/// Aggregated ranking metrics.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RankingReport {
    pub mrr: f64,
    pub hits_at_1: f64,
    pub hits_at_3: f64,
    pub hits_at_10: f64,
    pub queries: usize,
    /// Mean number of candidates actually ranked against per query.
    pub mean_pool_size: f64,
}

impl RankingReport {
    pub fn from_ranks(ranks: &[usize], pool_sizes: &[usize]) -> RankingReport {
        let n = ranks.len().max(1) as f64;
        RankingReport {
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            hits_at_1: ranks.iter().filter(|&&r| r <= 1).count() as f64 / n,
            hits_at_3: ranks.iter().filter(|&&r| r <= 3).count() as f64 / n,
            hits_at_10: ranks.iter().filter(|&&r| r <= 10).count() as f64 / n,
            queries: ranks.len(),
            mean_pool_size: pool_sizes.iter().sum::<usize>() as f64 / n,
        }
    }
}

/// Rank every `(head, tail)` pair's true tail against the candidate pool.
///
/// Candidates known to be positives for the same head (any split) are
/// filtered out, except the target itself. Scoring failures propagate.
pub fn rank_pairs<E>(
    pairs: &[(u32, u32)],
    relation: u32,
    pool: &[u32],
    known_pairs: &HashSet<(u32, u32)>,
    mut score: impl FnMut(Triple) -> Result<f64, E>,
) -> Result<RankingReport, E> {
    let mut ranks = Vec::with_capacity(pairs.len());
    let mut pool_sizes = Vec::with_capacity(pairs.len());
    for &(head, tail) in pairs {
        let target = score(Triple { head, relation, tail })?;
        let mut others = Vec::with_capacity(pool.len());
        for &candidate in pool {
            if candidate == tail || known_pairs.contains(&(head, candidate)) {
                continue;
            }
            others.push(score(Triple { head, relation, tail: candidate })?);
        }
        ranks.push(pessimistic_rank(target, &others));
        pool_sizes.push(others.len() + 1);
    }
    Ok(RankingReport::from_ranks(&ranks, &pool_sizes))
}

/// Min-max normalize `scores` to [0, 1]. A constant slice maps to all zeros.
pub fn min_max_normalize(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span <= 0.0 {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|&s| (s - lo) / span).collect()
}

/// Decision thresholds swept in the robustness analysis, as fractions of the
/// normalized score range.
pub const DEFAULT_MARGINS: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct MarginPoint {
    /// Threshold position as a fraction of the score range.
    pub margin: f64,
    /// Classification accuracy with positives at or above the threshold.
    pub accuracy: f64,
}

/// Classification accuracy as the decision threshold slides across the
/// normalized score range. Positive and negative scores are normalized
/// jointly; at margin γ, a score counts positive iff it is ≥ γ.
pub fn margin_sweep(pos_scores: &[f64], neg_scores: &[f64], margins: &[f64]) -> Vec<MarginPoint> {
    let mut all: Vec<f64> = Vec::with_capacity(pos_scores.len() + neg_scores.len());
    all.extend_from_slice(pos_scores);
    all.extend_from_slice(neg_scores);
    let normalized = min_max_normalize(&all);
    let (pos_n, neg_n) = normalized.split_at(pos_scores.len());
    let total = (pos_n.len() + neg_n.len()).max(1) as f64;
    margins
        .iter()
        .map(|&margin| {
            let correct = pos_n.iter().filter(|&&s| s >= margin).count()
                + neg_n.iter().filter(|&&s| s < margin).count();
            MarginPoint { margin, accuracy: correct as f64 / total }
        })
        .collect()
}

/// Max accuracy difference across a sweep — the robustness figure.
pub fn accuracy_spread(points: &[MarginPoint]) -> f64 {
    let lo = points.iter().map(|p| p.accuracy).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.accuracy).fold(f64::NEG_INFINITY, f64::max);
    if points.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

/// Write `label,score` rows (6 decimal places) for score-distribution plots.
pub fn write_score_distribution(
    out: &mut impl std::io::Write,
    pos_scores: &[f64],
    neg_scores: &[f64],
) -> std::io::Result<()> {
    writeln!(out, "label,score")?;
    for &s in pos_scores {
        writeln!(out, "positive,{s:.6}")?;
    }
    for &s in neg_scores {
        writeln!(out, "negative,{s:.6}")?;
    }
    Ok(())
}
