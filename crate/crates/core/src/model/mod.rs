//! Toy MoE classifier: input projection, `B` blocks of dense + ReLU followed
//! by an MoE layer, and a linear classification head.

mod checkpoint;
mod predict;
mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::param::{Param, Role};
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::{vecmat, Tensor};
use crate::routers::router::Init;
use crate::routers::{Dense, GraphOpts, Mode, Router, RouterConfig, RouterDecision, RouterVariant};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use predict::{
    example_key, predict_with_uncertainty, ExampleTrace, ForwardOpts, Perturbation, PredictOpts, Prediction,
};
pub use train::{elbo_loss, stage1_train, stage2_train, ElboParts, EpochLog, TrainConfig, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub features: usize,
    pub d: usize,
    pub expert_hidden: usize,
    pub blocks: usize,
    pub classes: usize,
    /// Adds each block's input to its MoE output.
    #[serde(default = "default_residual")]
    pub residual: bool,
    /// Router settings shared by every layer; `variant` is the base routing.
    pub router: RouterConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            features: 16,
            d: 32,
            expert_hidden: 32,
            blocks: 4,
            classes: 4,
            residual: true,
            router: RouterConfig::new(32, 8, 2, RouterVariant::Map),
        }
    }
}

fn default_residual() -> bool {
    true
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.features == 0 || self.d == 0 || self.expert_hidden == 0 || self.blocks == 0 || self.classes < 2 {
            return Err(Error::Config("model dimensions must be >= 1 and classes >= 2".into()));
        }
        if self.router.d != self.d {
            return Err(Error::Config(format!("router.d = {} but model d = {}", self.router.d, self.d)));
        }
        self.router.validate()
    }
}

/// `E(u) = ReLU(u·W1)·W2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    pub w1: Param,
    pub w2: Param,
}

fn uniform_param(name: String, rows: usize, cols: usize, rng: &mut RngStream) -> Param {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| bound * (2.0 * rng.uniform() - 1.0)).collect();
    Param::new(name, Role::Base, Tensor::matrix(rows, cols, data).expect("sizes match"))
}

impl Expert {
    pub fn new(prefix: &str, d: usize, e: usize, rng: &mut RngStream) -> Self {
        Self {
            w1: uniform_param(format!("{prefix}.w1"), d, e, rng),
            w2: uniform_param(format!("{prefix}.w2"), e, d, rng),
        }
    }

    pub fn forward(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut h = vecmat(u, &self.w1.value)?;
        h.iter_mut().for_each(|x| *x = x.max(0.0));
        vecmat(&h, &self.w2.value)
    }

    pub fn forward_graph(&self, g: &Graph, u: Var, trainable: bool) -> Result<Var> {
        let w1 = g.param(&self.w1.name, &self.w1.value, trainable)?;
        let w2 = g.param(&self.w2.name, &self.w2.value, trainable)?;
        let h = g.relu(g.matmul(u, w1)?)?;
        g.matmul(h, w2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeLayer {
    pub index: usize,
    pub experts: Vec<Expert>,
    pub router: Router,
}

impl MoeLayer {
    /// `Σ_i g_i E_i(u)` over the selected experts.
    pub fn combine(&self, u: &[f64], decision: &RouterDecision) -> Result<Vec<f64>> {
        if decision.gate_weights.len() != self.experts.len() {
            return Err(Error::shape("moe layer", "decision does not match expert count"));
        }
        let mut out = vec![0.0; u.len()];
        for (expert, &w) in self.experts.iter().zip(&decision.gate_weights) {
            if w == 0.0 {
                continue;
            }
            for (o, y) in out.iter_mut().zip(expert.forward(u)?) {
                *o += w * y;
            }
        }
        Ok(out)
    }

    /// Routes one token with `router` and mixes the chosen experts.
    pub fn forward_with(
        &self,
        router: &Router,
        u: &[f64],
        mode: Mode,
        samples: Option<usize>,
        rng: &mut RngStream,
    ) -> Result<(Vec<f64>, RouterDecision)> {
        let decision = router.route_samples(u, mode, samples, rng)?;
        let out = self.combine(u, &decision)?;
        Ok((out, decision))
    }

    pub fn forward(&self, u: &[f64], mode: Mode, rng: &mut RngStream) -> Result<(Vec<f64>, RouterDecision)> {
        self.forward_with(&self.router, u, mode, None, rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub dense: Dense,
    pub moe: MoeLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoEClassifier {
    pub config: ModelConfig,
    pub input_proj: Dense,
    pub blocks: Vec<Block>,
    pub head: Dense,
    /// Blocks whose router was replaced after stage 1, ascending.
    pub variational_layers: Vec<usize>,
}

/// Batched forward pass on the tape.
pub struct GraphForward {
    /// `[B, C]` class logits.
    pub logits: Var,
    /// Sum over layers of each router's mean-per-token regulariser.
    pub reg: Option<Var>,
    /// `[layer][example]` selection masks.
    pub selections: Vec<Vec<Vec<bool>>>,
}

impl MoEClassifier {
    /// Fresh model with deterministic routing in every layer.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed, 0x1417);
        let (f, d, e, n) = (config.features, config.d, config.expert_hidden, config.router.n);
        let input_proj = Dense::new("input_proj", Role::Base, f, d, Init::Uniform, &mut rng);
        let mut blocks = Vec::with_capacity(config.blocks);
        let router_cfg = config.router.with_variant(RouterVariant::Map);
        for i in 0..config.blocks {
            let dense = Dense::new(&format!("blocks.{i}.dense"), Role::Base, d, d, Init::Uniform, &mut rng);
            let experts = (0..n).map(|j| Expert::new(&format!("blocks.{i}.experts.{j}"), d, e, &mut rng)).collect();
            let w_r = uniform_param(String::new(), d, n, &mut rng).value;
            let router = Router::new(&format!("blocks.{i}.router"), router_cfg.clone(), w_r, &mut rng)?;
            blocks.push(Block { dense, moe: MoeLayer { index: i, experts, router } });
        }
        let head = Dense::new("head", Role::Base, d, config.classes, Init::Uniform, &mut rng);
        Ok(Self { config, input_proj, blocks, head, variational_layers: Vec::new() })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.input_proj.w, &self.input_proj.b];
        for b in &self.blocks {
            v.extend([&b.dense.w, &b.dense.b]);
            for e in &b.moe.experts {
                v.extend([&e.w1, &e.w2]);
            }
            v.extend(b.moe.router.params());
        }
        v.extend([&self.head.w, &self.head.b]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.input_proj.w, &mut self.input_proj.b];
        for b in &mut self.blocks {
            v.extend([&mut b.dense.w, &mut b.dense.b]);
            for e in &mut b.moe.experts {
                v.extend([&mut e.w1, &mut e.w2]);
            }
            v.extend(b.moe.router.params_mut());
        }
        v.extend([&mut self.head.w, &mut self.head.b]);
        v
    }

    pub fn param_count(&self, role: Option<Role>) -> usize {
        self.params().iter().filter(|p| role.is_none_or(|r| p.role == r)).map(|p| p.value.len()).sum()
    }

    /// Replaces the routers of `indices` with `cfg.variant`, keeping each
    /// layer's projection and drawing fresh inference networks.
    pub fn attach_variational_routers(&mut self, indices: &[usize], cfg: &RouterConfig, seed: u64) -> Result<()> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.blocks.len()) {
            return Err(Error::invalid(format!("layer {bad} out of range for {} blocks", self.blocks.len())));
        }
        let base = &self.config.router;
        let layer_cfg = RouterConfig { d: base.d, n: base.n, k: base.k, ..cfg.clone() };
        layer_cfg.validate()?;
        if layer_cfg.variant == RouterVariant::Map {
            return Ok(());
        }
        for &i in indices {
            let mut rng = RngStream::new(seed, 0xA77AC4).derive(i as u64);
            let router = &self.blocks[i].moe.router;
            self.blocks[i].moe.router = router.with_config(layer_cfg.clone(), &mut rng)?;
            if !self.variational_layers.contains(&i) {
                self.variational_layers.push(i);
            }
        }
        self.variational_layers.sort_unstable();
        Ok(())
    }

    /// Routing variant of every block.
    pub fn variants(&self) -> Vec<RouterVariant> {
        self.blocks.iter().map(|b| b.moe.router.variant()).collect()
    }

    /// Batched training-mode forward. `keys` seeds one stream per example
    /// and layer, matching [`MoEClassifier::forward_example`] in train mode.
    pub fn forward_graph(&self, g: &Graph, x: &Tensor, keys: &[u64], opts: GraphOpts) -> Result<GraphForward> {
        if x.rank() != 2 || x.cols() != self.config.features || x.rows() != keys.len() {
            return Err(Error::shape("model", format!("input {:?} with {} keys", x.shape(), keys.len())));
        }
        let xb = g.constant(x.clone())?;
        let mut h = self.input_proj.forward_graph(g, xb, opts.train_base)?;
        let mut reg: Option<Var> = None;
        let mut selections = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let a = g.relu(block.dense.forward_graph(g, h, opts.train_base)?)?;
            let mut rngs: Vec<RngStream> = keys.iter().map(|&k| layer_stream(k, i)).collect();
            let route = block.moe.router.forward_graph(g, a, &mut rngs, opts)?;
            let outs =
                block.moe.experts.iter().map(|e| e.forward_graph(g, a, opts.train_base)).collect::<Result<Vec<_>>>()?;
            let y = g.mix(route.gates, &outs)?;
            h = if self.config.residual { g.add(h, y)? } else { y };
            if let Some(r) = route.reg {
                reg = Some(match reg {
                    Some(acc) => g.add(acc, r)?,
                    None => r,
                });
            }
            selections.push(route.selections);
        }
        let logits = self.head.forward_graph(g, h, opts.train_base)?;
        Ok(GraphForward { logits, reg, selections })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.blocks.len() != self.config.blocks {
            return Err(Error::Checkpoint("block count does not match config".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let r = &b.moe.router.config;
            if b.moe.index != i || b.moe.experts.len() != r.n || r.d != self.config.d {
                return Err(Error::Checkpoint(format!("block {i} is inconsistent with the config")));
            }
            let variational = r.variant != RouterVariant::Map;
            if variational != self.variational_layers.contains(&i) {
                return Err(Error::Checkpoint(format!("block {i} variant disagrees with the layer list")));
            }
        }
        if self.params().iter().any(|p| !p.value.all_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(())
    }
}

/// Router stream of example `key` at `layer`.
pub fn layer_stream(key: u64, layer: usize) -> RngStream {
    RngStream::new(key, layer as u64)
}

/// SHA-256 of each parameter's name, shape and little-endian values.
pub fn param_digest<'a>(params: impl IntoIterator<Item = &'a Param>) -> BTreeMap<String, String> {
    params
        .into_iter()
        .map(|p| {
            let mut h = Sha256::new();
            h.update(p.name.as_bytes());
            for &s in p.value.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                h.update(v.to_le_bytes());
            }
            (p.name.clone(), hex::encode(h.finalize()))
        })
        .collect()
}

/// Digest of every parameter outside the inference networks.
pub fn frozen_digest(model: &MoEClassifier) -> BTreeMap<String, String> {
    param_digest(model.params().into_iter().filter(|p| p.role == Role::Base))
}

/// Fails with the first parameter whose digest differs.
pub fn check_frozen(before: &BTreeMap<String, String>, after: &BTreeMap<String, String>) -> Result<()> {
    for (name, digest) in before {
        if after.get(name) != Some(digest) {
            return Err(Error::FrozenParamChanged(name.clone()));
        }
    }
    if after.len() != before.len() {
        return Err(Error::FrozenParamChanged("parameter set changed".into()));
    }
    Ok(())
}
