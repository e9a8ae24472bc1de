//! Router state and the per-variant routing rules.
//!
//! Two paths share the same rules and consume random draws in the same
//! order: [`Router::route`] works on one token with plain vectors (used for
//! evaluation and by the oracles), [`Router::forward_graph`] routes a batch on
//! the autodiff tape for training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{gate_entropy, mc_logit_var};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::param::{Param, Role};
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::{softmax_row, vecmat, Tensor};

use super::config::{RouterConfig, RouterVariant};
use super::decision::{RouterDecision, UncertaintySignals};
use super::kl::{build_cholesky, temperature_from_raw, MIN_TEMPERATURE};
use super::posterior::GaussianPosterior;
use super::select::{gumbel_top_k, masked_softmax, renormalize, sample_k_from_logits, top_k_mask, GUMBEL_TAU};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// `s_train` samples; Gumbel-Top-K for VTSR.
    Train,
    /// `s_eval` samples; Sample-K for VTSR.
    Eval,
}

/// What the VTSR selection mask looks like on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GumbelPath {
    /// Hard mask forward, relaxed gradient backward.
    StraightThrough,
    /// Relaxed weights both ways; smooth, for gradient checks.
    Soft,
}

#[derive(Clone, Copy, Debug)]
pub struct GraphOpts {
    pub train_base: bool,
    pub train_phi: bool,
    pub gumbel: GumbelPath,
}

impl GraphOpts {
    pub fn stage1() -> Self {
        Self { train_base: true, train_phi: false, gumbel: GumbelPath::StraightThrough }
    }

    pub fn stage2() -> Self {
        Self { train_base: false, train_phi: true, gumbel: GumbelPath::StraightThrough }
    }
}

/// Affine layer `x·W + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Param,
    pub b: Param,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)` for weights and bias.
    Uniform,
    /// `N(0, std²)` weights, zero bias.
    Normal(f64),
}

impl Dense {
    pub fn new(name: &str, role: Role, fan_in: usize, fan_out: usize, init: Init, rng: &mut RngStream) -> Self {
        let (w, b) = match init {
            Init::Uniform => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut u = |n: usize| (0..n).map(|_| bound * (2.0 * rng.uniform() - 1.0)).collect::<Vec<_>>();
                (u(fan_in * fan_out), u(fan_out))
            }
            Init::Normal(std) => {
                let w = rng.normals(fan_in * fan_out).into_iter().map(|x| x * std).collect();
                (w, vec![0.0; fan_out])
            }
        };
        Self {
            w: Param::new(format!("{name}.w"), role, Tensor::matrix(fan_in, fan_out, w).expect("sizes match")),
            b: Param::new(format!("{name}.b"), role, Tensor::vector(b)),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.value.cols()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = vecmat(x, &self.w.value)?;
        for (o, b) in y.iter_mut().zip(self.b.value.data()) {
            *o += b;
        }
        Ok(y)
    }

    pub fn forward_graph(&self, g: &Graph, x: Var, trainable: bool) -> Result<Var> {
        let w = g.param(&self.w.name, &self.w.value, trainable)?;
        let b = g.param(&self.b.name, &self.b.value, trainable)?;
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }

    fn params(&self) -> [&Param; 2] {
        [&self.w, &self.b]
    }

    fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.w, &mut self.b]
    }
}

fn relu(mut x: Vec<f64>) -> Vec<f64> {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

/// Inference networks attached on top of a frozen router projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PhiNet {
    /// Shared backbone with residual-mean and scale heads. The scale head
    /// emits `N` log-scales (mean-field) or `N(N+1)/2` Cholesky entries.
    Gaussian { backbone: Dense, mean: Dense, scale: Dense },
    /// Scalar temperature network.
    Temperature { hidden: Dense, out: Dense },
}

/// Init std of the residual-mean head.
pub const HEAD_INIT_STD: f64 = 1e-3;

impl PhiNet {
    pub fn new(prefix: &str, cfg: &RouterConfig, rng: &mut RngStream) -> Option<Self> {
        let (d, h, n) = (cfg.d, cfg.h, cfg.n);
        let name = |part: &str| format!("{prefix}.phi.{part}");
        match cfg.variant {
            RouterVariant::VglrMf | RouterVariant::VglrFc => {
                let scale_out = if cfg.variant == RouterVariant::VglrMf { n } else { n * (n + 1) / 2 };
                let backbone = Dense::new(&name("backbone"), Role::Phi, d, h, Init::Uniform, rng);
                let mean = Dense::new(&name("mean"), Role::Phi, h, n, Init::Normal(HEAD_INIT_STD), rng);
                let mut scale =
                    Dense::new(&name("scale"), Role::Phi, h, scale_out, Init::Normal(cfg.scale_init_std), rng);
                let log_s = cfg.init_scale.ln();
                let b = scale.b.value.data_mut();
                if cfg.variant == RouterVariant::VglrMf {
                    b.fill(log_s);
                } else {
                    (0..n).for_each(|i| b[i * (i + 1) / 2 + i] = log_s);
                }
                Some(PhiNet::Gaussian { backbone, mean, scale })
            }
            RouterVariant::Vtsr => {
                let hidden = Dense::new(&name("hidden"), Role::Phi, d, h, Init::Uniform, rng);
                let mut out = Dense::new(&name("out"), Role::Phi, h, 1, Init::Uniform, rng);
                // softplus⁻¹(T₀ − floor)
                let t = cfg.init_temperature - MIN_TEMPERATURE;
                out.b.value.data_mut()[0] = if t > 30.0 { t } else { t.exp_m1().ln() };
                Some(PhiNet::Temperature { hidden, out })
            }
            _ => None,
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            PhiNet::Gaussian { backbone, mean, scale } => [backbone.params(), mean.params(), scale.params()].concat(),
            PhiNet::Temperature { hidden, out } => [hidden.params(), out.params()].concat(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            PhiNet::Gaussian { backbone, mean, scale } => {
                let mut v = Vec::with_capacity(6);
                v.extend(backbone.params_mut());
                v.extend(mean.params_mut());
                v.extend(scale.params_mut());
                v
            }
            PhiNet::Temperature { hidden, out } => {
                let mut v = Vec::with_capacity(4);
                v.extend(hidden.params_mut());
                v.extend(out.params_mut());
                v
            }
        }
    }
}

/// Outcome of a batched routing step on the tape.
pub struct GraphRoute {
    /// `[B, N]` gate weights, zero off the selection.
    pub gates: Var,
    /// Mean over tokens of the KL (VGLR) or `-log T` (VTSR).
    pub reg: Option<Var>,
    pub selections: Vec<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Router {
    pub config: RouterConfig,
    pub w_r: Param,
    pub phi: Option<PhiNet>,
}

impl Router {
    /// Router over projection `w_r` (`D×N`), named `{prefix}.w_r`.
    pub fn new(prefix: &str, config: RouterConfig, w_r: Tensor, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        if w_r.shape() != [config.d, config.n] {
            return Err(Error::shape(
                "router",
                format!("w_r {:?}, expected [{}, {}]", w_r.shape(), config.d, config.n),
            ));
        }
        let phi = PhiNet::new(prefix, &config, rng);
        Ok(Self { config, w_r: Param::new(format!("{prefix}.w_r"), Role::Base, w_r), phi })
    }

    pub fn prefix(&self) -> &str {
        self.w_r.name.strip_suffix(".w_r").unwrap_or(&self.w_r.name)
    }

    /// Same projection, new variant, fresh inference networks.
    pub fn with_config(&self, config: RouterConfig, rng: &mut RngStream) -> Result<Self> {
        Router::new(self.prefix(), config, self.w_r.value.clone(), rng)
    }

    pub fn variant(&self) -> RouterVariant {
        self.config.variant
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.w_r];
        if let Some(phi) = &self.phi {
            v.extend(phi.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.w_r];
        if let Some(phi) = &mut self.phi {
            v.extend(phi.params_mut());
        }
        v
    }

    pub fn logits(&self, u: &[f64]) -> Result<Vec<f64>> {
        vecmat(u, &self.w_r.value)
    }

    /// Gaussian posterior for VGLR routers.
    pub fn posterior(&self, u: &[f64]) -> Result<GaussianPosterior> {
        let Some(PhiNet::Gaussian { backbone, mean, scale }) = &self.phi else {
            return Err(Error::invalid(format!("{} router has no logit posterior", self.variant())));
        };
        let h = relu(backbone.forward(u)?);
        let delta_mu = mean.forward(&h)?;
        let raw = scale.forward(&h)?;
        if self.variant() == RouterVariant::VglrMf {
            GaussianPosterior::diagonal(delta_mu, raw.iter().map(|r| r.exp()).collect())
        } else {
            GaussianPosterior::cholesky(delta_mu, build_cholesky(&raw)?)
        }
    }

    /// Input-dependent temperature for VTSR routers.
    pub fn temperature(&self, u: &[f64]) -> Result<f64> {
        let Some(PhiNet::Temperature { hidden, out }) = &self.phi else {
            return Err(Error::invalid(format!("{} router has no temperature network", self.variant())));
        };
        let h = relu(hidden.forward(u)?);
        Ok(temperature_from_raw(out.forward(&h)?[0]))
    }

    fn samples(&self, mode: Mode) -> usize {
        match mode {
            Mode::Train => self.config.s_train,
            Mode::Eval => self.config.s_eval,
        }
    }

    /// Routes one token.
    pub fn route(&self, u: &[f64], mode: Mode, rng: &mut RngStream) -> Result<RouterDecision> {
        self.route_samples(u, mode, None, rng)
    }

    /// Routes one token with an explicit Monte Carlo sample count.
    pub fn route_samples(
        &self,
        u: &[f64],
        mode: Mode,
        samples: Option<usize>,
        rng: &mut RngStream,
    ) -> Result<RouterDecision> {
        let cfg = &self.config;
        let samples = samples.unwrap_or_else(|| self.samples(mode));
        let l_det = self.logits(u)?;
        match cfg.variant {
            RouterVariant::Map => Ok(decide_top_k(l_det, cfg.k)),
            RouterVariant::TempScale => decide_tempered(l_det, cfg.t_global, cfg.k, mode, rng, false),
            RouterVariant::McDropout => mc_dropout_route(u, &self.w_r.value, cfg.dropout_rate, cfg.k, samples, rng),
            RouterVariant::VglrMf | RouterVariant::VglrFc => {
                let post = self.posterior(u)?;
                vglr_decide(l_det, &post, cfg.k, samples, rng)
            }
            RouterVariant::Vtsr => {
                let t = self.temperature(u)?;
                vtsr_decide(l_det, t, cfg.k, mode, rng)
            }
        }
    }

    /// Routes a `[B, D]` batch on the tape. `rngs` holds one stream per row.
    pub fn forward_graph(&self, g: &Graph, u: Var, rngs: &mut [RngStream], opts: GraphOpts) -> Result<GraphRoute> {
        let cfg = &self.config;
        let shape = g.shape(u);
        if shape.len() != 2 || shape[1] != cfg.d || shape[0] != rngs.len() {
            return Err(Error::shape("router", format!("input {shape:?} with {} streams", rngs.len())));
        }
        let b = shape[0];
        let n = cfg.n;
        // VTSR keeps the base projection frozen even when the rest trains.
        let base_trainable = opts.train_base && cfg.variant != RouterVariant::Vtsr;
        let w = g.param(&self.w_r.name, &self.w_r.value, base_trainable)?;

        match (&cfg.variant, &self.phi) {
            (RouterVariant::Map, _) => {
                let l = g.matmul(u, w)?;
                let p = g.softmax(l)?;
                let masks = row_masks(g, p, |row| top_k_mask(row, cfg.k));
                route_renorm(g, p, masks, None)
            }
            (RouterVariant::TempScale, _) => {
                let l = g.matmul(u, w)?;
                let s = g.scale(l, 1.0 / cfg.t_global)?;
                let q = g.softmax(s)?;
                let sv = g.value(s);
                let masks = (0..b).map(|i| sample_mask(sv.row(i), cfg.k, &mut rngs[i])).collect::<Result<Vec<_>>>()?;
                route_renorm(g, q, masks, None)
            }
            (RouterVariant::McDropout, _) => {
                let keep = 1.0 - cfg.dropout_rate;
                let scaled: Vec<f64> = rngs
                    .iter_mut()
                    .flat_map(|r| dropout_mask(r, cfg.d, cfg.dropout_rate))
                    .map(|m| if m { 1.0 / keep } else { 0.0 })
                    .collect();
                let mask = g.constant(Tensor::matrix(b, cfg.d, scaled)?)?;
                let ud = g.mul(u, mask)?;
                let l = g.matmul(ud, w)?;
                let p = g.softmax(l)?;
                let masks = row_masks(g, p, |row| top_k_mask(row, cfg.k));
                route_renorm(g, p, masks, None)
            }
            (RouterVariant::VglrMf | RouterVariant::VglrFc, Some(PhiNet::Gaussian { backbone, mean, scale })) => {
                let l_det = g.matmul(u, w)?;
                let hb = backbone.forward_graph(g, u, opts.train_phi)?;
                let h = g.relu(hb)?;
                let dmu = mean.forward_graph(g, h, opts.train_phi)?;
                let raw = scale.forward_graph(g, h, opts.train_phi)?;
                let s_count = cfg.s_train;
                let eps: Vec<Vec<f64>> = rngs.iter_mut().map(|r| r.normals(s_count * n)).collect();
                let centre = g.add(l_det, dmu)?;

                let (factor, reg) = if cfg.variant == RouterVariant::VglrMf {
                    let sigma = g.exp(raw)?;
                    let terms = g.add(g.mul(dmu, dmu)?, g.mul(sigma, sigma)?)?;
                    let terms = g.sub(terms, g.scale(raw, 2.0)?)?;
                    let half = 0.5 * n as f64;
                    let reg = g.add_scalar(g.scale(g.mean(terms)?, half)?, -half)?;
                    (sigma, reg)
                } else {
                    let l = g.build_cholesky(raw)?;
                    let log_diag = g.log(g.diagonal(l)?)?;
                    let total = g.add(g.sum(g.mul(dmu, dmu)?)?, g.sum(g.mul(l, l)?)?)?;
                    let total = g.sub(total, g.scale(g.sum(log_diag)?, 2.0)?)?;
                    let reg = g.add_scalar(g.scale(total, 0.5 / b as f64)?, -0.5 * n as f64)?;
                    (l, reg)
                };

                let mut p_sum: Option<Var> = None;
                for s in 0..s_count {
                    let e: Vec<f64> = eps.iter().flat_map(|row| row[s * n..(s + 1) * n].iter().copied()).collect();
                    let e = g.constant(Tensor::matrix(b, n, e)?)?;
                    let noise = if cfg.variant == RouterVariant::VglrMf {
                        g.mul(factor, e)?
                    } else {
                        g.batch_matvec(factor, e)?
                    };
                    let p = g.softmax(g.add(centre, noise)?)?;
                    p_sum = Some(match p_sum {
                        Some(acc) => g.add(acc, p)?,
                        None => p,
                    });
                }
                let p = g.scale(p_sum.expect("s_train >= 1"), 1.0 / s_count as f64)?;
                let masks = row_masks(g, p, |row| top_k_mask(row, cfg.k));
                route_renorm(g, p, masks, Some(reg))
            }
            (RouterVariant::Vtsr, Some(PhiNet::Temperature { hidden, out })) => {
                let l_det = g.matmul(u, w)?;
                let hh = g.relu(hidden.forward_graph(g, u, opts.train_phi)?)?;
                let raw = g.reshape(out.forward_graph(g, hh, opts.train_phi)?, &[b])?;
                let t = g.add_scalar(g.softplus(raw)?, MIN_TEMPERATURE)?;
                let s = g.div_rows(l_det, t)?;
                let q = g.softmax(s)?;
                let noise: Vec<f64> =
                    rngs.iter_mut().flat_map(|r| (0..n).map(|_| r.gumbel()).collect::<Vec<_>>()).collect();
                let perturbed = g.add(s, g.constant(Tensor::matrix(b, n, noise)?)?)?;
                let relaxed = g.softmax(g.scale(perturbed, 1.0 / GUMBEL_TAU)?)?;
                let masks = row_masks(g, perturbed, |row| top_k_mask(row, cfg.k));
                let m = match opts.gumbel {
                    GumbelPath::StraightThrough => g.straight_through(mask_tensor(&masks)?, relaxed)?,
                    GumbelPath::Soft => relaxed,
                };
                let qm = g.mul(q, m)?;
                let gates = g.div_rows(qm, g.sum_last(qm)?)?;
                let reg = g.scale(g.mean(g.log(t)?)?, -1.0)?;
                Ok(GraphRoute { gates, reg: Some(reg), selections: masks })
            }
            (v, _) => Err(Error::invalid(format!("{v} router is missing its inference network"))),
        }
    }
}

fn row_masks(g: &Graph, v: Var, f: impl Fn(&[f64]) -> Vec<bool>) -> Vec<Vec<bool>> {
    g.with_value(v, |t| (0..t.rows()).map(|i| f(t.row(i))).collect())
}

fn mask_tensor(masks: &[Vec<bool>]) -> Result<Tensor> {
    let n = masks.first().map_or(0, Vec::len);
    let data = masks.iter().flatten().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    Tensor::matrix(masks.len(), n, data)
}

/// Gates `p ⊙ z / Σ(p ⊙ z)` on the tape.
fn route_renorm(g: &Graph, p: Var, masks: Vec<Vec<bool>>, reg: Option<Var>) -> Result<GraphRoute> {
    let z = g.constant(mask_tensor(&masks)?)?;
    let pz = g.mul(p, z)?;
    let gates = g.div_rows(pz, g.sum_last(pz)?)?;
    Ok(GraphRoute { gates, reg, selections: masks })
}

fn sample_mask(scaled_logits: &[f64], k: usize, rng: &mut RngStream) -> Result<Vec<bool>> {
    let picked = sample_k_from_logits(scaled_logits, k, rng)?;
    Ok(super::decision::mask_from_indices(scaled_logits.len(), &picked))
}

fn dropout_mask(rng: &mut RngStream, d: usize, rate: f64) -> Vec<bool> {
    (0..d).map(|_| rng.bernoulli(1.0 - rate)).collect()
}

/// Top-K routing of fixed logits.
pub fn decide_top_k(l_det: Vec<f64>, k: usize) -> RouterDecision {
    let probs = softmax_row(&l_det);
    let selection = top_k_mask(&probs, k);
    let gate_weights = masked_softmax(&l_det, &selection);
    RouterDecision {
        signals: UncertaintySignals { gate_entropy: gate_entropy(&probs), ..Default::default() },
        logits_det: l_det,
        logits_sampled: None,
        probs,
        selection,
        gate_weights,
        kl: 0.0,
    }
}

/// `l = u·W_r`, `p = softmax(l)`, `z = TopK(p)`.
pub fn deterministic_route(u: &[f64], w_r: &Tensor, k: usize) -> Result<RouterDecision> {
    check_k(k, w_r.cols())?;
    Ok(decide_top_k(vecmat(u, w_r)?, k))
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::invalid(format!("need 1 <= K <= N, got K={k}, N={n}")));
    }
    Ok(())
}

/// Monte Carlo routing under a Gaussian logit posterior: average the softmax
/// of `samples` reparameterised draws, then Top-K.
pub fn vglr_decide(
    l_det: Vec<f64>,
    post: &GaussianPosterior,
    k: usize,
    samples: usize,
    rng: &mut RngStream,
) -> Result<RouterDecision> {
    let n = l_det.len();
    check_k(k, n)?;
    if post.n() != n || samples == 0 {
        return Err(Error::invalid("posterior size or sample count does not match the router"));
    }
    let draws: Vec<Vec<f64>> = (0..samples).map(|_| post.sample(&l_det, &rng.normals(n))).collect();
    let mut probs = vec![0.0; n];
    for l in &draws {
        for (acc, p) in probs.iter_mut().zip(softmax_row(l)) {
            *acc += p / samples as f64;
        }
    }
    let selection = top_k_mask(&probs, k);
    let gate_weights = renormalize(&probs, &selection);
    let signals = UncertaintySignals {
        gate_entropy: gate_entropy(&probs),
        inf_logit_var: Some(post.trace()),
        inf_temp: None,
        mc_logit_var: (samples > 1).then(|| mc_logit_var(&draws)),
    };
    Ok(RouterDecision {
        logits_det: l_det,
        logits_sampled: Some(draws),
        probs,
        selection,
        gate_weights,
        kl: post.kl()?,
        signals,
    })
}

/// Tempered routing with `q = softmax(l_det / t)`. Selection draws Sample-K,
/// except for a learned temperature in training, which uses Gumbel-Top-K.
/// VTSR reports `t` and its `-log t` regulariser.
fn decide_tempered(
    l_det: Vec<f64>,
    t: f64,
    k: usize,
    mode: Mode,
    rng: &mut RngStream,
    learned: bool,
) -> Result<RouterDecision> {
    check_k(k, l_det.len())?;
    if !(t > 0.0) {
        return Err(Error::invalid("temperature must be > 0"));
    }
    let scaled: Vec<f64> = l_det.iter().map(|l| l / t).collect();
    let probs = softmax_row(&scaled);
    let selection =
        if learned && mode == Mode::Train { gumbel_top_k(&scaled, k, rng).mask } else { sample_mask(&scaled, k, rng)? };
    let gate_weights = masked_softmax(&scaled, &selection);
    let signals =
        UncertaintySignals { gate_entropy: gate_entropy(&probs), inf_temp: learned.then_some(t), ..Default::default() };
    Ok(RouterDecision {
        logits_det: l_det,
        logits_sampled: None,
        probs,
        selection,
        gate_weights,
        kl: if learned { -t.ln() } else { 0.0 },
        signals,
    })
}

pub fn vtsr_decide(l_det: Vec<f64>, t: f64, k: usize, mode: Mode, rng: &mut RngStream) -> Result<RouterDecision> {
    decide_tempered(l_det, t, k, mode, rng, true)
}

/// Sample-K on `softmax(u·W_r / t)`.
pub fn fixed_temp_route(u: &[f64], w_r: &Tensor, t: f64, k: usize, rng: &mut RngStream) -> Result<RouterDecision> {
    decide_tempered(vecmat(u, w_r)?, t, k, Mode::Eval, rng, false)
}

/// Averages `samples` dropout passes over the router input, then Top-K.
pub fn mc_dropout_route(
    u: &[f64],
    w_r: &Tensor,
    rate: f64,
    k: usize,
    samples: usize,
    rng: &mut RngStream,
) -> Result<RouterDecision> {
    check_k(k, w_r.cols())?;
    if !(0.0..1.0).contains(&rate) || samples == 0 {
        return Err(Error::invalid("dropout rate must lie in [0, 1) with at least one pass"));
    }
    let keep = 1.0 - rate;
    let mut draws = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mask = dropout_mask(rng, u.len(), rate);
        let ud: Vec<f64> = u.iter().zip(&mask).map(|(x, &m)| if m { x / keep } else { 0.0 }).collect();
        draws.push(vecmat(&ud, w_r)?);
    }
    mc_dropout_decide(vecmat(u, w_r)?, draws, k)
}

/// Routing from explicit dropout-pass logits.
pub fn mc_dropout_decide(l_det: Vec<f64>, draws: Vec<Vec<f64>>, k: usize) -> Result<RouterDecision> {
    let n = l_det.len();
    check_k(k, n)?;
    let s = draws.len();
    let mut probs = vec![0.0; n];
    for l in &draws {
        for (acc, p) in probs.iter_mut().zip(softmax_row(l)) {
            *acc += p / s as f64;
        }
    }
    let selection = top_k_mask(&probs, k);
    let gate_weights = renormalize(&probs, &selection);
    let signals = UncertaintySignals {
        gate_entropy: gate_entropy(&probs),
        mc_logit_var: (s > 1).then(|| mc_logit_var(&draws)),
        ..Default::default()
    };
    Ok(RouterDecision {
        logits_det: l_det,
        logits_sampled: Some(draws),
        probs,
        selection,
        gate_weights,
        kl: 0.0,
        signals,
    })
}

/// Number of entries of the Cholesky head for `n` experts.
pub fn cholesky_head_len(n: usize) -> usize {
    n * (n + 1) / 2
}
