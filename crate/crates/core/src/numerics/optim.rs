use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::param::Param;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

fn check_len(param: &Param, grad: &Tensor) -> Result<()> {
    if param.value.shape() != grad.shape() {
        return Err(Error::shape(
            "optimizer step",
            format!("{}: {:?} vs grad {:?}", param.name, param.value.shape(), grad.shape()),
        ));
    }
    Ok(())
}

pub fn sgd_step(param: &mut Param, grad: &Tensor, lr: f64) -> Result<()> {
    check_len(param, grad)?;
    for (w, g) in param.value.data_mut().iter_mut().zip(grad.data()) {
        *w -= lr * g;
    }
    Ok(())
}

/// Bias-corrected Adam update; `t` is the 1-based step count.
pub fn adam_step(param: &mut Param, grad: &Tensor, state: &mut AdamState, lr: f64, t: u64) -> Result<()> {
    check_len(param, grad)?;
    if state.m.len() != grad.len() {
        state.m = vec![0.0; grad.len()];
        state.v = vec![0.0; grad.len()];
    }
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    for (k, (w, &g)) in param.value.data_mut().iter_mut().zip(grad.data()).enumerate() {
        state.m[k] = BETA1 * state.m[k] + (1.0 - BETA1) * g;
        state.v[k] = BETA2 * state.v[k] + (1.0 - BETA2) * g * g;
        let m_hat = state.m[k] / c1;
        let v_hat = state.v[k] / c2;
        *w -= lr * m_hat / (v_hat.sqrt() + EPS);
    }
    Ok(())
}

/// Optimizer over a set of named parameters.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    states: BTreeMap<String, AdamState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, step: 0, states: BTreeMap::new() }
    }

    /// Applies one update to each parameter that has a gradient.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Param>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        self.step += 1;
        for p in params {
            let Some(g) = grads.get(&p.name) else { continue };
            match self.kind {
                OptimizerKind::Sgd => sgd_step(p, g, self.lr)?,
                OptimizerKind::Adam => {
                    let st = self.states.entry(p.name.clone()).or_default();
                    adam_step(p, g, st, self.lr, self.step)?;
                }
            }
            if !p.value.all_finite() {
                return Err(Error::NonFinite { op: "optimizer step" });
            }
        }
        Ok(())
    }
}
