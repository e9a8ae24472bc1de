//! Expert selection: Top-K, Sample-K and Gumbel-Top-K.

use crate::error::{Error, Result};
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::softmax_row;

use super::decision::mask_from_indices;

/// Tolerance for "sums to one" checks on probability inputs.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Indices of the `k` largest values, ties to the lowest index.
/// Returned in descending order of value.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn top_k_mask(values: &[f64], k: usize) -> Vec<bool> {
    mask_from_indices(values.len(), &top_k_indices(values, k))
}

/// Sequential categorical draws without replacement from `softmax(logits)`,
/// renormalising over the remaining experts after each removal. Works in
/// log space so very peaked distributions never underflow to an all-zero
/// remainder. Entries at `-inf` are never drawn.
pub fn sample_k_from_logits(logits: &[f64], k: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    let available = logits.iter().filter(|l| l.is_finite()).count();
    if k > available {
        return Err(Error::invalid(format!("cannot draw {k} experts from {available} with positive probability")));
    }
    let mut remaining: Vec<usize> = (0..logits.len()).filter(|&i| logits[i].is_finite()).collect();
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let max = remaining.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = remaining.iter().map(|&i| (logits[i] - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let target = rng.uniform() * total;
        let mut cum = 0.0;
        let mut choice = None;
        for (pos, w) in weights.iter().enumerate() {
            cum += w;
            if target < cum {
                choice = Some(pos);
                break;
            }
        }
        // Rounding can leave `target` at the very top of the range.
        let pos = choice.unwrap_or_else(|| weights.iter().rposition(|&w| w > 0.0).expect("max entry has weight 1"));
        picked.push(remaining.remove(pos));
    }
    Ok(picked)
}

/// Sample-K on an explicit probability vector.
pub fn sample_k_without_replacement(p: &[f64], k: usize, rng: &mut RngStream) -> Result<Vec<bool>> {
    check_simplex(p)?;
    let positive = p.iter().filter(|&&x| x > 0.0).count();
    if positive < k {
        return Err(Error::invalid(format!("need at least {k} positive-probability experts, found {positive}")));
    }
    let logits: Vec<f64> = p.iter().map(|&x| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY }).collect();
    let picked = sample_k_from_logits(&logits, k, rng)?;
    Ok(mask_from_indices(p.len(), &picked))
}

pub fn check_simplex(p: &[f64]) -> Result<()> {
    if p.is_empty() || p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::invalid("probabilities must be finite and non-negative"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
    }
    Ok(())
}

/// Hard Gumbel-Top-K selection plus its relaxed weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelSelection {
    pub mask: Vec<bool>,
    /// `softmax((scaled_logits + noise) / tau)`.
    pub relaxed: Vec<f64>,
    pub noise: Vec<f64>,
}

/// Straight-through relaxation temperature used during training.
pub const GUMBEL_TAU: f64 = 1.0;

pub fn gumbel_top_k(scaled_logits: &[f64], k: usize, rng: &mut RngStream) -> GumbelSelection {
    let noise: Vec<f64> = (0..scaled_logits.len()).map(|_| rng.gumbel()).collect();
    gumbel_top_k_with_noise(scaled_logits, noise, k, GUMBEL_TAU)
}

pub fn gumbel_top_k_with_noise(scaled_logits: &[f64], noise: Vec<f64>, k: usize, tau: f64) -> GumbelSelection {
    let perturbed: Vec<f64> = scaled_logits.iter().zip(&noise).map(|(s, g)| s + g).collect();
    let mask = top_k_mask(&perturbed, k);
    let relaxed = softmax_row(&perturbed.iter().map(|x| x / tau).collect::<Vec<_>>());
    GumbelSelection { mask, relaxed, noise }
}

/// `p` restricted to the mask and rescaled to sum to one.
pub fn renormalize(p: &[f64], mask: &[bool]) -> Vec<f64> {
    let total: f64 = p.iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| x).sum();
    p.iter().zip(mask).map(|(&x, &m)| if m { x / total } else { 0.0 }).collect()
}

/// Softmax over the masked entries of `logits`, zero elsewhere.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits.iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| *x).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().zip(mask).map(|(&x, &m)| if m { (x - max).exp() } else { 0.0 }).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
