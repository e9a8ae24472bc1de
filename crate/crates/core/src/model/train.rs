use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{check_frozen, frozen_digest, MoEClassifier, PredictOpts};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{calibration_report, DEFAULT_BINS};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::optim::{Optimizer, OptimizerKind};
use crate::numerics::param::Role;
use crate::numerics::rng::{mix, RngStream};
use crate::numerics::tensor::Tensor;
use crate::routers::GraphOpts;

use super::predict::predict_with_uncertainty;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    /// Weight of the router regulariser in the stage-2 objective.
    pub beta: f64,
    pub seed: u64,
    /// Epochs without validation-NLL improvement before stopping.
    pub patience: usize,
    /// Monte Carlo samples for stage-2 validation; `None` uses `s_eval`.
    pub val_samples: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            lr_stage1: 1e-3,
            lr_stage2: 1e-3,
            epochs_stage1: 30,
            epochs_stage2: 20,
            batch_size: 32,
            beta: 0.1,
            seed: 0,
            patience: 3,
            val_samples: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr_stage1 > 0.0 && self.lr_stage2 > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be >= 0".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_ce: f64,
    pub train_reg: f64,
    pub val_nll: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
}

pub struct ElboParts {
    pub total: Var,
    pub ce: Var,
    pub reg: Option<Var>,
}

/// Cross-entropy plus `beta` times the summed per-layer mean regulariser.
pub fn elbo_loss(
    g: &Graph,
    model: &MoEClassifier,
    x: &Tensor,
    labels: &[usize],
    keys: &[u64],
    beta: f64,
    opts: GraphOpts,
) -> Result<ElboParts> {
    let fwd = model.forward_graph(g, x, keys, opts)?;
    let ce = g.cross_entropy(fwd.logits, labels)?;
    let total = match fwd.reg {
        Some(r) if beta != 0.0 => g.add(ce, g.scale(r, beta)?)?,
        _ => ce,
    };
    if !g.scalar(total).is_finite() {
        return Err(Error::NonFinite { op: "elbo loss" });
    }
    Ok(ElboParts { total, ce, reg: fwd.reg })
}

/// Stage 1: every parameter trained on cross-entropy with deterministic routing.
pub fn stage1_train(
    model: &mut MoEClassifier,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if !model.variational_layers.is_empty() {
        return Err(Error::invalid("stage 1 expects deterministic routers everywhere"));
    }
    run_stage(model, train, val, cfg, 1, GraphOpts::stage1(), Role::Base)
}

/// Stage 2: only the inference networks train on the ELBO; every other
/// parameter is audited to be bitwise unchanged.
pub fn stage2_train(
    model: &mut MoEClassifier,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if model.param_count(Some(Role::Phi)) == 0 {
        return Ok(TrainOutcome::default());
    }
    let before = frozen_digest(model);
    let out = run_stage(model, train, val, cfg, 2, GraphOpts::stage2(), Role::Phi)?;
    check_frozen(&before, &frozen_digest(model))?;
    Ok(out)
}

fn run_stage(
    model: &mut MoEClassifier,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    stage: u8,
    opts: GraphOpts,
    role: Role,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (epochs, lr) = if stage == 1 { (cfg.epochs_stage1, cfg.lr_stage1) } else { (cfg.epochs_stage2, cfg.lr_stage2) };
    let beta = if stage == 1 { 0.0 } else { cfg.beta };
    let val_samples = if stage == 1 { None } else { cfg.val_samples };
    let mut opt = Optimizer::new(cfg.optimizer, lr);
    let mut outcome = TrainOutcome::default();
    let mut best: Option<(f64, MoEClassifier)> = None;
    let mut since_best = 0;

    for epoch in 0..epochs {
        let epoch_seed = mix(mix(cfg.seed, stage as u64), epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut RngStream::new(epoch_seed, 0));
        let (mut loss_sum, mut ce_sum, mut reg_sum) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.subset(chunk);
            let keys: Vec<u64> = chunk.iter().map(|&i| mix(epoch_seed, i as u64)).collect();
            let g = Graph::new();
            let parts = elbo_loss(&g, model, &batch.features, &batch.labels, &keys, beta, opts)?;
            g.backward(parts.total)?;
            let grads = g.param_grads();
            opt.step(model.params_mut().into_iter().filter(|p| p.role == role), &grads)?;
            let w = chunk.len() as f64;
            loss_sum += g.scalar(parts.total) * w;
            ce_sum += g.scalar(parts.ce) * w;
            reg_sum += parts.reg.map_or(0.0, |r| g.scalar(r)) * w;
        }
        let n = train.len() as f64;
        let preds =
            predict_with_uncertainty(model, val, PredictOpts { seed: mix(cfg.seed, 0x7A1), samples: val_samples })?;
        let probs: Vec<Vec<f64>> = preds.into_iter().map(|p| p.probs).collect();
        let report = calibration_report(&probs, &val.labels, DEFAULT_BINS)?;
        outcome.log.push(EpochLog {
            stage,
            epoch,
            train_loss: loss_sum / n,
            train_ce: ce_sum / n,
            train_reg: reg_sum / n,
            val_nll: report.nll,
            val_acc: report.accuracy,
        });
        if best.as_ref().is_none_or(|(b, _)| report.nll < *b) {
            best = Some((report.nll, model.clone()));
            outcome.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    Ok(outcome)
}
