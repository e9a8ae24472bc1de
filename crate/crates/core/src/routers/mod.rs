//! Routing mechanisms: deterministic Top-K, tempered and dropout baselines,
//! and the variational Gaussian-logit and temperature routers.

pub mod config;
pub mod decision;
pub mod kl;
pub mod posterior;
pub mod router;
pub mod select;

pub use config::{RouterConfig, RouterVariant};
pub use decision::{mask_from_indices, mask_indices, RouterDecision, UncertaintySignals};
pub use kl::{build_cholesky, kl_fc, kl_mf, kl_vtsr, temp_reg_loss, temperature_from_raw};
pub use posterior::{GaussianPosterior, PosteriorScale};
pub use router::{
    decide_top_k, deterministic_route, fixed_temp_route, mc_dropout_decide, mc_dropout_route, vglr_decide, vtsr_decide,
    Dense, GraphOpts, GraphRoute, GumbelPath, Mode, PhiNet, Router,
};
pub use select::{
    gumbel_top_k, gumbel_top_k_with_noise, sample_k_from_logits, sample_k_without_replacement, top_k_indices,
    top_k_mask, GumbelSelection,
};
