//! AUC and log-loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clip applied to predictions before taking logs.
pub const LOGLOSS_EPS: f64 = 1e-7;

/// Mean binary negative log-likelihood with predictions clipped to
/// `[eps, 1 − eps]`.
pub fn logloss_clipped(labels: &[f64], predictions: &[f64], eps: f64) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyInput { op: "logloss" });
    }
    if labels.len() != predictions.len() {
        return Err(Error::ShapeMismatch {
            op: "logloss",
            left: vec![labels.len()],
            right: vec![predictions.len()],
        });
    }
    let total: f64 = labels
        .iter()
        .zip(predictions)
        .map(|(&y, &p)| {
            let p = p.clamp(eps, 1.0 - eps);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    Ok(-total / labels.len() as f64)
}

pub fn logloss(labels: &[f64], predictions: &[f64]) -> Result<f64> {
    logloss_clipped(labels, predictions, LOGLOSS_EPS)
}

/// Rank-based AUC (Mann–Whitney), ties between a positive and a negative
/// counting one half.
pub fn auc(labels: &[f64], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::ShapeMismatch {
            op: "auc",
            left: vec![labels.len()],
            right: vec![scores.len()],
        });
    }
    let positives = labels.iter().filter(|&&y| y > 0.5).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass {
            positives,
            negatives,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of (1-based, tie-averaged) ranks of the positives, kept doubled so
    // every quantity stays an exact integer.
    let mut rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 averaged: (i + j + 2) / 2
        let avg_x2 = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] > 0.5).count() as u128;
        rank_sum_x2 += avg_x2 * pos_in_group;
        i = j + 1;
    }
    let p = positives as u128;
    let u_x2 = rank_sum_x2 - p * (p + 1);
    Ok(u_x2 as f64 / (2 * positives * negatives) as f64)
}

/// Per-example trace used for gate and attention analyses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub example_id: usize,
    pub label: f64,
    pub score: f64,
    pub alpha_mean: Option<f64>,
    pub recency_seconds: u64,
    pub content_weights: Vec<f64>,
    pub temporal_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub logloss: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    #[serde(skip)]
    pub records: Vec<ExampleRecord>,
}

impl MetricsReport {
    pub fn from_scores(labels: &[f64], scores: &[f64]) -> Result<Self> {
        let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
        Ok(Self {
            auc: auc(labels, scores)?,
            logloss: logloss(labels, scores)?,
            n_pos,
            n_neg: labels.len() - n_pos,
            records: Vec::new(),
        })
    }
}
