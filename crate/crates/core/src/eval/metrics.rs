use serde::{Deserialize, Serialize};

use crate::error::{CkfError, Result};

/// Σ r·P(r) over ratings 1..=5.
pub fn predict_rating(dist: &[f64]) -> f64 {
    dist.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum()
}

/// P(yes) from a [yes, no] distribution.
pub fn predict_click(dist: &[f64]) -> f64 {
    dist[0]
}

/// Twice the Mann-Whitney count (wins count 2, ties 1), plus the class
/// sizes.
fn pair_count2(scores: &[f64], labels: &[bool]) -> Result<(u64, u64, u64)> {
    if scores.len() != labels.len() {
        return Err(CkfError::contract(format!(
            "auc: {} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(CkfError::Numeric(format!("auc: score {s}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut wins2, mut neg_below, mut pos, mut neg) = (0u64, 0u64, 0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        wins2 += 2 * gp * neg_below + gp * gn;
        neg_below += gn;
        pos += gp;
        neg += gn;
        i = j;
    }
    Ok((wins2, pos, neg))
}

/// (wins + ½·ties) / (P·N) over all positive/negative pairs.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (wins2, pos, neg) = pair_count2(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(CkfError::contract(format!(
            "auc undefined with {pos} positives and {neg} negatives"
        )));
    }
    Ok(wins2 as f64 / (2 * pos * neg) as f64)
}

/// Unweighted mean of per-user AUC over users with both classes.
pub fn u_auc(groups: &[(Vec<f64>, Vec<bool>)]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (s, l) in groups {
        let (_, pos, neg) = pair_count2(s, l)?;
        if pos > 0 && neg > 0 {
            sum += auc(s, l)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(CkfError::contract("u-auc undefined: no user has both classes"));
    }
    Ok(sum / n as f64)
}

/// One ranked candidate list.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub candidates: Vec<usize>,
    pub scores: Vec<f64>,
    pub truth: usize,
}

impl Ranking {
    /// Highest score; ties go to the smaller item id.
    pub fn top(&self) -> Option<usize> {
        self.candidates
            .iter()
            .zip(&self.scores)
            .max_by(|(ia, sa), (ib, sb)| sa.total_cmp(sb).then(ib.cmp(ia)))
            .map(|(&i, _)| i)
    }
}

/// Fraction of rankings whose top candidate is the truth.
pub fn hit_at_1(rankings: &[Ranking]) -> Result<f64> {
    if rankings.is_empty() {
        return Err(CkfError::contract("hit@1 of no rankings"));
    }
    let mut hits = 0usize;
    for r in rankings {
        if r.candidates.len() != r.scores.len() || !r.candidates.contains(&r.truth) {
            return Err(CkfError::contract("ranking must score every candidate, truth included"));
        }
        if r.top() == Some(r.truth) {
            hits += 1;
        }
    }
    Ok(hits as f64 / rankings.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    #[serde(rename = "MAE")]
    pub mae: f64,
    #[serde(rename = "MSE")]
    pub mse: f64,
}

pub fn regression_metrics(preds: &[f64], truths: &[f64]) -> Result<Regression> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(CkfError::contract(format!(
            "regression metrics need equal nonempty lengths, got {} and {}",
            preds.len(),
            truths.len()
        )));
    }
    let n = preds.len() as f64;
    let (mut a, mut s) = (0.0, 0.0);
    for (p, t) in preds.iter().zip(truths) {
        a += (p - t).abs();
        s += (p - t) * (p - t);
    }
    Ok(Regression { mae: a / n, mse: s / n })
}

/// Global average rating: the constant every example is predicted with.
pub fn gar_baseline(train_ratings: &[f64]) -> Result<f64> {
    if train_ratings.is_empty() {
        return Err(CkfError::contract("GAR needs at least one training rating"));
    }
    Ok(train_ratings.iter().sum::<f64>() / train_ratings.len() as f64)
}
