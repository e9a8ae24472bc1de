use serde::{Deserialize, Serialize};

/// Per-token uncertainty read-outs. Signals a variant cannot produce stay `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySignals {
    pub gate_entropy: f64,
    pub inf_logit_var: Option<f64>,
    pub inf_temp: Option<f64>,
    pub mc_logit_var: Option<f64>,
}

/// Routing outcome for a single token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterDecision {
    pub logits_det: Vec<f64>,
    /// One row per stochastic sample, when the variant draws any.
    pub logits_sampled: Option<Vec<Vec<f64>>>,
    pub probs: Vec<f64>,
    pub selection: Vec<bool>,
    pub gate_weights: Vec<f64>,
    /// KL term (VGLR), temperature regulariser (VTSR) or 0.
    pub kl: f64,
    pub signals: UncertaintySignals,
}

impl RouterDecision {
    pub fn selected(&self) -> Vec<usize> {
        mask_indices(&self.selection)
    }
}

pub fn mask_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect()
}

pub fn mask_from_indices(n: usize, idx: &[usize]) -> Vec<bool> {
    let mut m = vec![false; n];
    for &i in idx {
        m[i] = true;
    }
    m
}
