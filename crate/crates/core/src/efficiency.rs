//! Analytic parameter and multiply-accumulate counts for router variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    /// Modified MoE layers.
    pub l: u64,
    pub n: u64,
    pub d: u64,
    pub h: u64,
    pub s: u64,
    pub base_active_params: u64,
    pub base_macs_per_token: Option<u64>,
}

impl ArchSpec {
    /// Granite-3B-MoE settings with 800M active parameters.
    pub fn granite() -> Self {
        Self { l: 10, n: 40, d: 1536, h: 384, s: 35, base_active_params: 800_000_000, base_macs_per_token: None }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.l, self.n, self.d, self.h, self.s, self.base_active_params].contains(&0) {
            return Err(Error::Config("all architecture sizes must be positive".into()));
        }
        if self.h > self.d {
            return Err(Error::Config("inference width H must not exceed D".into()));
        }
        if self.base_macs_per_token == Some(0) {
            return Err(Error::Config("base MACs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostVariant {
    /// `S` replicated router weight samples.
    WeightSpace,
    VglrMf,
    VglrFc,
    Vtsr,
}

impl CostVariant {
    pub const ALL: [CostVariant; 4] =
        [CostVariant::WeightSpace, CostVariant::VglrMf, CostVariant::VglrFc, CostVariant::Vtsr];

    pub fn name(self) -> &'static str {
        match self {
            CostVariant::WeightSpace => "weight_space",
            CostVariant::VglrMf => "vglr_mf",
            CostVariant::VglrFc => "vglr_fc",
            CostVariant::Vtsr => "vtsr",
        }
    }
}

impl fmt::Display for CostVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CostVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "weight_space" | "mcdropout" | "mc_dropout" | "swag" => Ok(CostVariant::WeightSpace),
            "vglr_mf" => Ok(CostVariant::VglrMf),
            "vglr_fc" => Ok(CostVariant::VglrFc),
            "vtsr" => Ok(CostVariant::Vtsr),
            _ => Err(Error::Config(format!("unknown cost variant `{s}`"))),
        }
    }
}

fn tri(n: u64) -> u64 {
    n * (n + 1) / 2
}

pub fn params_weight_space(a: &ArchSpec) -> u64 {
    a.l * a.s.saturating_sub(1) * a.d * a.n
}

pub fn params_vglr_mf(a: &ArchSpec) -> u64 {
    a.l * (a.d * a.h + 2 * a.h * a.n)
}

pub fn params_vglr_fc(a: &ArchSpec) -> u64 {
    a.l * (a.d * a.h + a.h * a.n + a.h * tri(a.n))
}

pub fn params_vtsr(a: &ArchSpec) -> u64 {
    a.l * (a.d * a.h + a.h)
}

pub fn params(a: &ArchSpec, v: CostVariant) -> u64 {
    match v {
        CostVariant::WeightSpace => params_weight_space(a),
        CostVariant::VglrMf => params_vglr_mf(a),
        CostVariant::VglrFc => params_vglr_fc(a),
        CostVariant::Vtsr => params_vtsr(a),
    }
}

/// Added multiply-accumulates per token.
pub fn macs_per_token(a: &ArchSpec, v: CostVariant) -> u64 {
    let (l, n, d, h, s) = (a.l, a.n, a.d, a.h, a.s);
    match v {
        CostVariant::WeightSpace => l * s * d * n,
        CostVariant::VglrMf => l * (d * h + 2 * h * n + s * n),
        CostVariant::VglrFc => l * (d * h + h * n + h * tri(n) + s * tri(n)),
        CostVariant::Vtsr => l * (d * h + h + n),
    }
}

pub fn overhead_percent(added: u64, base: u64) -> f64 {
    100.0 * added as f64 / base as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub variant: CostVariant,
    pub params: u64,
    pub params_millions: f64,
    pub param_overhead_pct: f64,
    pub macs: u64,
    pub gmacs: f64,
    /// `2 × MACs`, when requested.
    pub gflops: Option<f64>,
    pub mac_overhead_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub arch: ArchSpec,
    pub rows: Vec<CostRow>,
}

pub fn cost_report(a: &ArchSpec, variants: &[CostVariant], with_flops: bool) -> Result<CostReport> {
    a.validate()?;
    if variants.is_empty() {
        return Err(Error::Config("variant list is empty".into()));
    }
    let rows = variants
        .iter()
        .map(|&v| {
            let p = params(a, v);
            let m = macs_per_token(a, v);
            CostRow {
                variant: v,
                params: p,
                params_millions: (p as f64 / 1e5).round() / 10.0,
                param_overhead_pct: overhead_percent(p, a.base_active_params),
                macs: m,
                gmacs: m as f64 / 1e9,
                gflops: with_flops.then(|| 2.0 * m as f64 / 1e9),
                mac_overhead_pct: a.base_macs_per_token.map(|b| overhead_percent(m, b)),
            }
        })
        .collect();
    Ok(CostReport { arch: a.clone(), rows })
}
