//! Threshold-free detection metrics with ID as the positive class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auroc: f64,
    pub aupr: f64,
    pub fpr95: f64,
}

/// Scores paired with labels (1 = ID, 0 = OOD) for one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub method: String,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl DetectionResult {
    pub fn metrics(&self) -> Result<Metrics> {
        compute_metrics(&self.scores, &self.labels)
    }
}

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidArgument(format!("label {l} is not 0 or 1")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument(
            "metrics need at least one ID and one OOD score".into(),
        ));
    }
    Ok((pos, neg))
}

/// Probability that a random ID score beats a random OOD score, ties
/// counting one half. Computed from integer win and tie counts.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let mut ood: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 0)
        .map(|(&s, _)| s)
        .collect();
    ood.sort_by(f64::total_cmp);
    let (mut wins, mut ties) = (0u64, 0u64);
    for (&s, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 1) {
        let below = ood.partition_point(|&o| o < s);
        let not_above = ood.partition_point(|&o| o <= s);
        wins += below as u64;
        ties += (not_above - below) as u64;
    }
    Ok((wins as f64 + 0.5 * ties as f64) / (pos as f64 * neg as f64))
}

/// Thresholds at each distinct score from high to low; yields
/// `(true positives, false positives)` after admitting each tie group.
fn sweep(scores: &[f64], labels: &[u8]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        out.push((tp, fp));
    }
    out
}

/// Average precision: sum over thresholds of recall increase times precision.
pub fn aupr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    let mut area = 0.0;
    let mut prev_tp = 0;
    for (tp, fp) in sweep(scores, labels) {
        if tp > prev_tp {
            area += (tp - prev_tp) as f64 / pos as f64 * (tp as f64 / (tp + fp) as f64);
            prev_tp = tp;
        }
    }
    Ok(area)
}

/// False-positive rate at the highest threshold whose true-positive rate
/// reaches 95%.
pub fn fpr95(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    for (tp, fp) in sweep(scores, labels) {
        if 100 * tp >= 95 * pos {
            return Ok(fp as f64 / neg as f64);
        }
    }
    unreachable!("the lowest threshold admits every positive")
}

pub fn compute_metrics(scores: &[f64], labels: &[u8]) -> Result<Metrics> {
    Ok(Metrics {
        auroc: auroc(scores, labels)?,
        aupr: aupr(scores, labels)?,
        fpr95: fpr95(scores, labels)?,
    })
}
