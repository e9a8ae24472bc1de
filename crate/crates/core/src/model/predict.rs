use serde::{Deserialize, Serialize};

use super::{layer_stream, MoEClassifier};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::rng::{hash_row, mix, RngStream};
use crate::numerics::tensor::softmax_row;
use crate::parallel::map_range;
use crate::routers::{Mode, Router, RouterDecision, UncertaintySignals};

const NOISE_STREAM: u64 = 1 << 32;

/// Additive Gaussian noise on the input of one block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Perturbation {
    pub layer: usize,
    pub sigma: f64,
    /// Separates repeated noise draws for the same example.
    pub stream: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOpts<'a> {
    pub mode: Mode,
    /// Overrides each router's Monte Carlo sample count.
    pub samples: Option<usize>,
    pub perturb: Option<Perturbation>,
    /// Routes one block with a substitute router.
    pub router_override: Option<(usize, &'a Router)>,
}

impl Default for ForwardOpts<'_> {
    fn default() -> Self {
        Self { mode: Mode::Eval, samples: None, perturb: None, router_override: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExampleTrace {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub decisions: Vec<RouterDecision>,
    /// L2 norm of each block's (unperturbed) input.
    pub block_input_norms: Vec<f64>,
}

/// Per-example stream key; equal rows share a key.
pub fn example_key(seed: u64, row: &[f64]) -> u64 {
    mix(seed, hash_row(row))
}

impl MoEClassifier {
    /// Single-example forward pass on plain vectors.
    pub fn forward_example(&self, x: &[f64], key: u64, opts: &ForwardOpts) -> Result<ExampleTrace> {
        if x.len() != self.config.features {
            return Err(Error::shape("model", format!("{} features, expected {}", x.len(), self.config.features)));
        }
        let mut h = self.input_proj.forward(x)?;
        let mut decisions = Vec::with_capacity(self.blocks.len());
        let mut norms = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            norms.push(h.iter().map(|v| v * v).sum::<f64>().sqrt());
            if let Some(p) = opts.perturb.filter(|p| p.layer == i) {
                let mut noise = RngStream::new(key, NOISE_STREAM + i as u64).derive(p.stream);
                h.iter_mut().for_each(|v| *v += p.sigma * noise.standard_normal());
            }
            let mut a = block.dense.forward(&h)?;
            a.iter_mut().for_each(|v| *v = v.max(0.0));
            let router = match opts.router_override {
                Some((layer, r)) if layer == i => r,
                _ => &block.moe.router,
            };
            let mut rng = layer_stream(key, i);
            let (out, decision) = block.moe.forward_with(router, &a, opts.mode, opts.samples, &mut rng)?;
            decisions.push(decision);
            if self.config.residual {
                h.iter_mut().zip(&out).for_each(|(x, y)| *x += y);
            } else {
                h = out;
            }
        }
        let logits = self.head.forward(&h)?;
        let probs = softmax_row(&logits);
        Ok(ExampleTrace { logits, probs, decisions, block_input_norms: norms })
    }

    /// Forward pass over every row, in parallel, keyed by row content.
    pub fn trace_dataset(&self, data: &Dataset, seed: u64, opts: &ForwardOpts) -> Result<Vec<ExampleTrace>> {
        map_range(data.len(), |i| {
            let row = data.row(i);
            self.forward_example(row, example_key(seed, row), opts)
        })
        .into_iter()
        .collect()
    }

    /// Layers whose signals are averaged: the variational ones, or every
    /// layer when there are none.
    pub fn signal_layers(&self) -> Vec<usize> {
        if self.variational_layers.is_empty() {
            (0..self.blocks.len()).collect()
        } else {
            self.variational_layers.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictOpts {
    pub seed: u64,
    /// Monte Carlo samples per router; `None` keeps each router's `s_eval`.
    pub samples: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub signals: UncertaintySignals,
    pub selections: Vec<Vec<bool>>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Class probabilities and uncertainty signals averaged over
/// [`MoEClassifier::signal_layers`].
pub fn predict_with_uncertainty(model: &MoEClassifier, data: &Dataset, opts: PredictOpts) -> Result<Vec<Prediction>> {
    let fwd = ForwardOpts { samples: opts.samples, ..Default::default() };
    let layers = model.signal_layers();
    let traces = model.trace_dataset(data, opts.seed, &fwd)?;
    Ok(traces
        .into_iter()
        .map(|t| {
            let sig = |f: &dyn Fn(&UncertaintySignals) -> Option<f64>| {
                mean_of(layers.iter().map(|&l| f(&t.decisions[l].signals)))
            };
            let signals = UncertaintySignals {
                gate_entropy: sig(&|s| Some(s.gate_entropy)).unwrap_or(0.0),
                inf_logit_var: sig(&|s| s.inf_logit_var),
                inf_temp: sig(&|s| s.inf_temp),
                mc_logit_var: sig(&|s| s.mc_logit_var),
            };
            Prediction {
                selections: t.decisions.iter().map(|d| d.selection.clone()).collect(),
                probs: t.probs,
                signals,
            }
        })
        .collect())
}
