//! Routing stability under input noise and fixed-temperature layer sweeps.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{calibration_report, jaccard_masks, DEFAULT_BINS};
use crate::model::{example_key, ForwardOpts, MoEClassifier, Perturbation};
use crate::numerics::rng::RngStream;
use crate::parallel::map_range;
use crate::routers::RouterVariant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationSpec {
    pub gamma_levels: Vec<f64>,
    pub diagnostic_gamma: f64,
    /// Noise draws per example.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            gamma_levels: vec![0.001, 0.002, 0.005, 0.007, 0.01, 0.02, 0.05],
            diagnostic_gamma: 0.01,
            repeats: 1,
            seed: 0,
        }
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.gamma_levels.is_empty()
            || self.gamma_levels.iter().any(|g| !(*g > 0.0))
            || !(self.diagnostic_gamma > 0.0)
        {
            return Err(Error::Config("noise levels must be > 0".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        Ok(())
    }
}

/// `u + ε`, `ε ~ N(0, σ²I)` with `σ = gamma · mean_norm`.
pub fn perturb_input(u: &[f64], gamma: f64, mean_norm: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    if !(gamma > 0.0) {
        return Err(Error::invalid("gamma must be > 0"));
    }
    if !(mean_norm >= 0.0) {
        return Err(Error::invalid("mean norm must be >= 0"));
    }
    let sigma = gamma * mean_norm;
    Ok(u.iter().map(|x| x + sigma * rng.standard_normal()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityCell {
    pub layer: usize,
    pub gamma: f64,
    pub mean_jaccard: f64,
    pub q10: f64,
    pub q50: f64,
    pub q90: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub diagnostic_gamma: f64,
    /// Layer-major, then in `gamma_levels` order.
    pub cells: Vec<StabilityCell>,
    /// Most brittle layer first.
    pub ranking: Vec<usize>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Mean L2 norm of each block's clean input over `data`.
pub fn mean_block_norms(model: &MoEClassifier, data: &Dataset, seed: u64) -> Result<Vec<f64>> {
    let traces = model.trace_dataset(data, seed, &ForwardOpts::default())?;
    let mut sums = vec![0.0; model.num_blocks()];
    for t in &traces {
        sums.iter_mut().zip(&t.block_input_norms).for_each(|(s, n)| *s += n);
    }
    Ok(sums.into_iter().map(|s| s / traces.len() as f64).collect())
}

/// Jaccard between clean and perturbed selections at `layer`, one value per
/// example and repeat. Clean and perturbed passes share router streams, so
/// stochastic routers differ only through the injected noise.
pub fn layer_jaccards(
    model: &MoEClassifier,
    data: &Dataset,
    layer: usize,
    sigma: f64,
    repeats: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if layer >= model.num_blocks() {
        return Err(Error::invalid(format!("layer {layer} out of range")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::invalid("sigma must be >= 0"));
    }
    let per_example = map_range(data.len(), |i| -> Result<Vec<f64>> {
        let row = data.row(i);
        let key = example_key(seed, row);
        let clean = model.forward_example(row, key, &ForwardOpts::default())?;
        let clean_sel = &clean.decisions[layer].selection;
        (0..repeats)
            .map(|r| {
                let opts = ForwardOpts {
                    perturb: Some(Perturbation { layer, sigma, stream: r as u64 }),
                    ..Default::default()
                };
                let noisy = model.forward_example(row, key, &opts)?;
                Ok(jaccard_masks(clean_sel, &noisy.decisions[layer].selection))
            })
            .collect()
    });
    Ok(per_example.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

/// Per-layer, per-level Jaccard statistics and the sensitivity ranking.
pub fn layerwise_stability(model: &MoEClassifier, data: &Dataset, spec: &PerturbationSpec) -> Result<StabilityReport> {
    spec.validate()?;
    let norms = mean_block_norms(model, data, spec.seed)?;
    let mut levels = spec.gamma_levels.clone();
    if !levels.contains(&spec.diagnostic_gamma) {
        levels.push(spec.diagnostic_gamma);
    }
    let mut cells = Vec::new();
    for (layer, &norm) in norms.iter().enumerate() {
        for &gamma in &levels {
            let mut j = layer_jaccards(model, data, layer, gamma * norm, spec.repeats, spec.seed)?;
            j.sort_by(f64::total_cmp);
            cells.push(StabilityCell {
                layer,
                gamma,
                mean_jaccard: j.iter().sum::<f64>() / j.len() as f64,
                q10: quantile(&j, 0.1),
                q50: quantile(&j, 0.5),
                q90: quantile(&j, 0.9),
            });
        }
    }
    let mut report = StabilityReport { diagnostic_gamma: spec.diagnostic_gamma, cells, ranking: Vec::new() };
    report.ranking = sensitivity_ranking(&report)?;
    Ok(report)
}

/// Layers by ascending mean Jaccard at the diagnostic level; ties keep
/// index order.
pub fn sensitivity_ranking(report: &StabilityReport) -> Result<Vec<usize>> {
    let mut at: Vec<(usize, f64)> =
        report.cells.iter().filter(|c| c.gamma == report.diagnostic_gamma).map(|c| (c.layer, c.mean_jaccard)).collect();
    if at.is_empty() {
        return Err(Error::invalid("report has no cells at the diagnostic level"));
    }
    at.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(at.into_iter().map(|(l, _)| l).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer: usize,
    pub temperature: f64,
    pub accuracy: f64,
    pub ece: f64,
}

/// Replaces one layer at a time with fixed-temperature Sample-K routing and
/// reports accuracy and ECE; other layers keep their routers.
pub fn fixed_temperature_layer_sweep(
    model: &MoEClassifier,
    data: &Dataset,
    temperatures: &[f64],
    layers: &[usize],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(layers.len() * temperatures.len());
    for &layer in layers {
        let Some(block) = model.blocks.get(layer) else {
            return Err(Error::invalid(format!("layer {layer} out of range")));
        };
        for &t in temperatures {
            let mut cfg = block.moe.router.config.with_variant(RouterVariant::TempScale);
            cfg.t_global = t;
            let router = block.moe.router.with_config(cfg, &mut RngStream::new(seed, 0))?;
            let opts = ForwardOpts { router_override: Some((layer, &router)), ..Default::default() };
            let traces = model.trace_dataset(data, seed, &opts)?;
            let probs: Vec<Vec<f64>> = traces.into_iter().map(|t| t.probs).collect();
            let report = calibration_report(&probs, &data.labels, DEFAULT_BINS)?;
            rows.push(SweepRow { layer, temperature: t, accuracy: report.accuracy, ece: report.ece });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.0);
        assert!((quantile(&v, 0.1) - 0.4).abs() < 1e-12);
        assert_eq!(quantile(&[7.0], 0.9), 7.0);
    }

    #[test]
    fn perturb_rejects_zero_gamma() {
        let mut rng = RngStream::new(0, 0);
        assert!(perturb_input(&[1.0], 0.0, 1.0, &mut rng).is_err());
        let a = perturb_input(&[1.0, 2.0], 0.1, 2.0, &mut RngStream::new(4, 4)).unwrap();
        let b = perturb_input(&[1.0, 2.0], 0.1, 2.0, &mut RngStream::new(4, 4)).unwrap();
        assert_eq!(a, b);
    }

    fn cell(layer: usize, gamma: f64, j: f64) -> StabilityCell {
        StabilityCell { layer, gamma, mean_jaccard: j, q10: j, q50: j, q90: j }
    }

    #[test]
    fn ranking_orders_by_jaccard() {
        let mut r = StabilityReport {
            diagnostic_gamma: 0.01,
            cells: vec![cell(0, 0.01, 0.9), cell(1, 0.01, 0.95), cell(2, 0.01, 0.5), cell(2, 0.05, 0.1)],
            ranking: vec![],
        };
        assert_eq!(sensitivity_ranking(&r).unwrap(), vec![2, 0, 1]);
        r.cells = (0..4).map(|l| cell(l, 0.01, 0.8)).collect();
        assert_eq!(sensitivity_ranking(&r).unwrap(), vec![0, 1, 2, 3]);
    }
}
