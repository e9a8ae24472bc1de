use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterVariant {
    /// Deterministic Top-K.
    Map,
    /// Sample-K from a globally tempered softmax.
    TempScale,
    /// Dropout on the router input, averaged over passes.
    McDropout,
    /// Gaussian logit posterior, diagonal covariance.
    VglrMf,
    /// Gaussian logit posterior, Cholesky-factored covariance.
    VglrFc,
    /// Learned per-input temperature with Sample-K.
    Vtsr,
}

impl RouterVariant {
    pub const ALL: [RouterVariant; 6] = [
        RouterVariant::Map,
        RouterVariant::TempScale,
        RouterVariant::McDropout,
        RouterVariant::VglrMf,
        RouterVariant::VglrFc,
        RouterVariant::Vtsr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RouterVariant::Map => "map",
            RouterVariant::TempScale => "temp_scale",
            RouterVariant::McDropout => "mc_dropout",
            RouterVariant::VglrMf => "vglr_mf",
            RouterVariant::VglrFc => "vglr_fc",
            RouterVariant::Vtsr => "vtsr",
        }
    }

    pub fn is_vglr(self) -> bool {
        matches!(self, RouterVariant::VglrMf | RouterVariant::VglrFc)
    }

    /// Variants with trainable inference networks.
    pub fn has_phi(self) -> bool {
        self.is_vglr() || self == RouterVariant::Vtsr
    }

    pub fn is_stochastic(self) -> bool {
        self != RouterVariant::Map
    }
}

impl fmt::Display for RouterVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RouterVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        match key.as_str() {
            "map" | "det" | "deterministic" => Ok(RouterVariant::Map),
            "temp_scale" | "tempscale" => Ok(RouterVariant::TempScale),
            "mc_dropout" | "mcdropout" | "mcdr" => Ok(RouterVariant::McDropout),
            "vglr_mf" => Ok(RouterVariant::VglrMf),
            "vglr_fc" => Ok(RouterVariant::VglrFc),
            "vtsr" => Ok(RouterVariant::Vtsr),
            _ => Err(Error::Config(format!("unknown router variant `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterConfig {
    /// Hidden dimension of the routed representation.
    pub d: usize,
    /// Number of experts.
    pub n: usize,
    /// Active experts per token.
    pub k: usize,
    /// Inference-network width.
    pub h: usize,
    pub s_train: usize,
    pub s_eval: usize,
    pub variant: RouterVariant,
    pub dropout_rate: f64,
    pub t_global: f64,
    /// Initial posterior standard deviation of the Gaussian routers.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    /// Initial learned temperature.
    #[serde(default = "default_init_temperature")]
    pub init_temperature: f64,
    /// Init std of the scale-head weights.
    #[serde(default = "default_scale_init_std")]
    pub scale_init_std: f64,
}

fn default_init_scale() -> f64 {
    1.0
}

fn default_init_temperature() -> f64 {
    1.0
}

fn default_scale_init_std() -> f64 {
    0.3
}

impl RouterConfig {
    pub fn new(d: usize, n: usize, k: usize, variant: RouterVariant) -> Self {
        Self {
            d,
            n,
            k,
            h: (d / 4).max(1),
            s_train: 1,
            s_eval: 35,
            variant,
            dropout_rate: 0.1,
            t_global: 1.0,
            init_scale: default_init_scale(),
            init_temperature: default_init_temperature(),
            scale_init_std: default_scale_init_std(),
        }
    }

    pub fn with_variant(&self, variant: RouterVariant) -> Self {
        Self { variant, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.k == 0 || self.k > self.n {
            return bad("router needs 1 <= k <= n");
        }
        if self.d == 0 || self.h == 0 || self.n == 0 || self.s_train == 0 || self.s_eval == 0 {
            return bad("router dimensions and sample counts must be >= 1");
        }
        if !(self.t_global > 0.0) {
            return bad("t_global must be > 0");
        }
        if !(self.init_scale > 0.0 && self.init_temperature > 1e-6) {
            return bad("init_scale and init_temperature must be positive");
        }
        if !(self.scale_init_std >= 0.0) {
            return bad("scale_init_std must be >= 0");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        Ok(())
    }
}
