//! Calibration, OoD-detection and routing-stability metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routers::GaussianPosterior;

/// Default number of equal-width confidence bins.
pub const DEFAULT_BINS: usize = 15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub lower: f64,
    pub upper: f64,
    pub confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
    pub mce: f64,
    pub bin_edges: Vec<f64>,
    /// Non-empty bins only.
    pub bins: Vec<BinStat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub signal: String,
    pub auroc: f64,
    pub auprc: f64,
    pub scores_id: Vec<f64>,
    pub scores_ood: Vec<f64>,
}

impl DetectionReport {
    /// OoD is the positive class; higher scores mean "more OoD".
    pub fn new(signal: impl Into<String>, scores_id: Vec<f64>, scores_ood: Vec<f64>) -> Result<Self> {
        Ok(Self {
            signal: signal.into(),
            auroc: auroc(&scores_id, &scores_ood)?,
            auprc: auprc(&scores_id, &scores_ood)?,
            scores_id,
            scores_ood,
        })
    }
}

fn check_pairs(confidences: &[f64], correct: &[bool]) -> Result<()> {
    if confidences.len() != correct.len() {
        return Err(Error::invalid(format!(
            "{} confidences but {} correctness flags",
            confidences.len(),
            correct.len()
        )));
    }
    if confidences.is_empty() {
        return Err(Error::invalid("calibration needs at least one prediction"));
    }
    if confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::invalid("confidences must lie in [0, 1]"));
    }
    Ok(())
}

/// Equal-width binning; the last bin is closed at 1.
pub fn calibration_bins(confidences: &[f64], correct: &[bool], bins: usize) -> Result<Vec<BinStat>> {
    check_pairs(confidences, correct)?;
    if bins == 0 {
        return Err(Error::invalid("need at least one bin"));
    }
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    let mut count = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ((c * bins as f64).floor() as usize).min(bins - 1);
        conf[b] += c;
        hits[b] += ok as usize;
        count[b] += 1;
    }
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| BinStat {
            lower: b as f64 / bins as f64,
            upper: (b + 1) as f64 / bins as f64,
            confidence: conf[b] / count[b] as f64,
            accuracy: hits[b] as f64 / count[b] as f64,
            count: count[b],
        })
        .collect())
}

pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    let n = confidences.len() as f64;
    Ok(calibration_bins(confidences, correct, bins)?
        .iter()
        .map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs())
        .sum())
}

pub fn mce(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    Ok(calibration_bins(confidences, correct, bins)?
        .iter()
        .map(|b| (b.accuracy - b.confidence).abs())
        .fold(0.0, f64::max))
}

/// Accuracy, NLL and calibration of class-probability rows.
pub fn calibration_report(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<CalibrationReport> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::invalid("need one probability row per label"));
    }
    let mut conf = Vec::with_capacity(probs.len());
    let mut correct = Vec::with_capacity(probs.len());
    let mut nll = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        if y >= p.len() {
            return Err(Error::invalid(format!("label {y} out of range for {} classes", p.len())));
        }
        let pred = argmax(p);
        conf.push(p[pred].clamp(0.0, 1.0));
        correct.push(pred == y);
        nll -= p[y].max(f64::MIN_POSITIVE).ln();
    }
    let n = probs.len() as f64;
    let stats = calibration_bins(&conf, &correct, bins)?;
    Ok(CalibrationReport {
        accuracy: correct.iter().filter(|&&c| c).count() as f64 / n,
        nll: nll / n,
        ece: stats.iter().map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs()).sum(),
        mce: stats.iter().map(|b| (b.accuracy - b.confidence).abs()).fold(0.0, f64::max),
        bin_edges: (0..=bins).map(|b| b as f64 / bins as f64).collect(),
        bins: stats,
    })
}

/// Index of the largest entry, first on ties.
pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) }).0
}

fn check_sides(scores_id: &[f64], scores_ood: &[f64]) -> Result<()> {
    if scores_id.is_empty() || scores_ood.is_empty() {
        return Err(Error::invalid("detection needs scores on both sides"));
    }
    if scores_id.iter().chain(scores_ood).any(|s| !s.is_finite()) {
        return Err(Error::invalid("detection scores must be finite"));
    }
    Ok(())
}

/// `P(ood score > id score)` with ties counted one half.
pub fn auroc(scores_id: &[f64], scores_ood: &[f64]) -> Result<f64> {
    check_sides(scores_id, scores_ood)?;
    let mut all: Vec<(f64, bool)> =
        scores_id.iter().map(|&s| (s, false)).chain(scores_ood.iter().map(|&s| (s, true))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (n0, n1) = (scores_id.len() as f64, scores_ood.len() as f64);
    Ok((rank_sum - n1 * (n1 + 1.0) / 2.0) / (n0 * n1))
}

/// Average precision with OoD positive: `Σ ΔRecall · Precision` over
/// descending thresholds, each group of tied scores forming one threshold.
pub fn auprc(scores_id: &[f64], scores_ood: &[f64]) -> Result<f64> {
    check_sides(scores_id, scores_ood)?;
    let mut all: Vec<(f64, bool)> =
        scores_id.iter().map(|&s| (s, false)).chain(scores_ood.iter().map(|&s| (s, true))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let positives = scores_ood.len() as f64;
    let (mut tp, mut fp, mut ap) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let mut group_tp = 0.0;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                group_tp += 1.0;
            } else {
                fp += 1.0;
            }
            j += 1;
        }
        tp += group_tp;
        ap += group_tp / positives * tp / (tp + fp);
        i = j;
    }
    Ok(ap)
}

/// Shannon entropy in nats, `0 log 0 = 0`.
pub fn gate_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Trace of the posterior covariance.
pub fn inf_logit_var(post: &GaussianPosterior) -> f64 {
    post.trace()
}

/// `1/(S-1) Σ_s ‖l_s - l̄‖²`; zero for fewer than two samples.
pub fn mc_logit_var(samples: &[Vec<f64>]) -> f64 {
    let s = samples.len();
    if s < 2 {
        return 0.0;
    }
    let n = samples[0].len();
    let mean: Vec<f64> = (0..n).map(|j| samples.iter().map(|r| r[j]).sum::<f64>() / s as f64).collect();
    let total: f64 = samples.iter().map(|r| r.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>()).sum();
    total / (s - 1) as f64
}

/// `|A ∩ B| / |A ∪ B|` of two index sets; two empty sets count as equal.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    use std::collections::BTreeSet;
    let a: BTreeSet<_> = a.iter().collect();
    let b: BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Jaccard of two selection masks.
pub fn jaccard_masks(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
