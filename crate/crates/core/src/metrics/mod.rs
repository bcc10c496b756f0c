//! Threshold metrics over image scores and pooled pixel maps, per-region
//! overlap, and the per-category report.

mod pro;
mod report;

pub use pro::{label_components, pro, pro_curve, DEFAULT_FPR_LIMIT};
pub use report::{
    aggregate_seeds, classification_metrics, harmonic_mean, segmentation_metrics, summarize,
    CategoryMetrics, ClassificationMetrics, MetricReport, SeedAggregate, SegmentationMetrics,
    CSV_COLUMNS,
};

use crate::error::{precondition, Result};

/// Scores with binary labels, paired by index.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScores {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.is_empty() || scores.len() != labels.len() {
            return Err(precondition(format!(
                "{} scores and {} labels; need equal non-zero lengths",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(precondition("scores must be finite"));
        }
        Ok(Self { scores, labels })
    }

    /// Labels given as 0/1 integers; anything non-zero counts as positive.
    pub fn from_binary(scores: Vec<f64>, labels: &[u8]) -> Result<Self> {
        Self::new(scores, labels.iter().map(|l| *l != 0).collect())
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    /// Same labels, scores passed through `f`.
    pub fn map_scores(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.scores.iter().map(|s| f(*s)).collect(),
            self.labels.clone(),
        )
    }

    /// Indices in descending score order; equal scores keep index order.
    fn descending(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|a, b| self.scores[*b].total_cmp(&self.scores[*a]));
        idx
    }
}

/// Best F1 over the thresholds `{unique scores} ∪ {+∞}` with `score ≥ t`
/// predicted positive. Returns `(f1, threshold)`; among equal F1 values the
/// smallest threshold wins.
pub fn f1_max(data: &LabeledScores) -> Result<(f64, f64)> {
    let positives = data.positives();
    if positives == 0 {
        return Err(precondition("F1 is undefined without positive labels"));
    }
    let order = data.descending();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = (0.0, f64::INFINITY);
    let mut i = 0;
    while i < order.len() {
        let t = data.scores[order[i]];
        while i < order.len() && data.scores[order[i]] == t {
            if data.labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let f1 = f1_score(tp, fp, positives - tp);
        if f1 >= best.0 {
            best = (f1, t);
        }
    }
    Ok(best)
}

pub(crate) fn f1_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// Area under the ROC curve as the Mann–Whitney statistic, ties counting half.
pub fn auroc(data: &LabeledScores) -> Result<f64> {
    let (p, n) = (data.positives(), data.negatives());
    if p == 0 || n == 0 {
        return Err(precondition(
            "AUROC needs both positive and negative labels",
        ));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.sort_by(|a, b| data.scores[*a].total_cmp(&data.scores[*b]));
    // twice the rank sum keeps tied mid-ranks integral
    let mut rank_sum2 = 0u64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && data.scores[idx[j]] == data.scores[idx[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j) as u64;
        let pos_in_group = idx[i..j].iter().filter(|k| data.labels[**k]).count() as u64;
        rank_sum2 += mid2 * pos_in_group;
        i = j;
    }
    let u2 = rank_sum2 - (p * (p + 1)) as u64;
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// `Σ_k (R_k − R_{k−1}) P_k` over the descending ranking, ties kept in index
/// order.
pub fn average_precision(data: &LabeledScores) -> Result<f64> {
    let positives = data.positives();
    if positives == 0 {
        return Err(precondition(
            "average precision needs at least one positive label",
        ));
    }
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, i) in data.descending().into_iter().enumerate() {
        if data.labels[i] {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}
