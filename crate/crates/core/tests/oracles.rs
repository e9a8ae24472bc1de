//! Closed forms, samplers, gradients and metrics against independent
//! reference computations, at reduced sample sizes.

#[path = "support/oracles.rs"]
mod oracles;

use oracles::*;
use vroute_core::metrics::{auprc, auroc, ece, gate_entropy, inf_logit_var, jaccard, mc_logit_var, mce};
use vroute_core::numerics::{RngStream, Tensor};
use vroute_core::routers::{GaussianPosterior, RouterVariant};

#[test]
fn gaussian_kl_matches_monte_carlo() {
    let (mf, fc) = kl_gaussian_max_rel_err(8, 200_000, 3);
    assert!(mf < 0.02, "mean-field relative error {mf}");
    assert!(fc < 0.02, "full-covariance relative error {fc}");
}

#[test]
fn temperature_kl_is_negative_entropy() {
    assert!(kl_vtsr_identity_max_err(100, 5) < 1e-12);
}

#[test]
fn enumeration_is_a_distribution() {
    let p = [0.1, 0.2, 0.3, 0.4];
    let subsets = enumerate_subsets(&p, 2);
    assert_eq!(subsets.len(), 6);
    assert!((subsets.values().sum::<f64>() - 1.0).abs() < 1e-12);
    let k1 = enumerate_subsets(&p, 1);
    assert!((k1[&vec![3]] - 0.4).abs() < 1e-15);
    // {0,1}: 0.1·0.2/0.9 + 0.2·0.1/0.8
    assert!((subsets[&vec![0, 1]] - (0.02 / 0.9 + 0.02 / 0.8)).abs() < 1e-15);
}

#[test]
fn samplers_match_enumeration() {
    let (sk, gk) = sampler_max_tv(20_000, 11);
    assert!(sk < 0.03, "sample-k tv {sk}");
    assert!(gk < 0.03, "gumbel tv {gk}");
}

#[test]
fn vanishing_noise_recovers_top_k() {
    for frac in limit_agreement(300, 2) {
        assert!(frac >= 0.999, "agreement {frac}");
    }
}

#[test]
fn stage2_gradients_match_finite_differences() {
    for v in [RouterVariant::VglrMf, RouterVariant::VglrFc, RouterVariant::Vtsr] {
        let (err, count) = elbo_grad_max_rel_err(v, 1);
        assert!(count > 0);
        assert!(err < 1e-5, "{v}: {err}");
    }
}

#[test]
fn stage2_leaves_base_untouched() {
    for v in [RouterVariant::VglrFc, RouterVariant::Vtsr] {
        assert!(freeze_audit(v, 4).is_empty());
    }
}

#[test]
fn ece_worked_examples() {
    assert_eq!(ece(&[1.0; 5], &[true; 5], 15).unwrap(), 0.0);
    let c = [0.9; 4];
    let ok = [true, true, false, false];
    assert!((ece(&c, &ok, 15).unwrap() - 0.4).abs() < 1e-9);
    assert!((mce(&c, &ok, 15).unwrap() - 0.4).abs() < 1e-9);
}

#[test]
fn ece_matches_binned_oracle() {
    let mut rng = RngStream::new(9, 0);
    for _ in 0..100 {
        let n = 1 + (rng.uniform() * 200.0) as usize;
        let conf: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let ok: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.6).collect();
        let (e, m) = ece_bins(&conf, &ok, 15);
        let got_e = ece(&conf, &ok, 15).unwrap();
        let got_m = mce(&conf, &ok, 15).unwrap();
        assert!((got_e - e).abs() < 1e-9 && (got_m - m).abs() < 1e-9);
        assert!(got_m >= got_e - 1e-12);
    }
}

#[test]
fn calibrated_simulation_has_small_ece() {
    let mut rng = RngStream::new(10, 0);
    let n = 100_000;
    let conf: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let ok: Vec<bool> = conf.iter().map(|&c| rng.uniform() < c).collect();
    assert!(ece(&conf, &ok, 15).unwrap() < 0.02);
}

#[test]
fn auroc_worked_examples() {
    assert_eq!(auroc(&[0.1, 0.2], &[0.3, 0.4]).unwrap(), 1.0);
    let got = auroc(&[0.1, 0.4], &[0.2, 0.3, 0.5]).unwrap();
    assert!((got - 4.0 / 6.0).abs() < 1e-9);
    let mut rng = RngStream::new(1, 1);
    let a: Vec<f64> = (0..10_000).map(|_| rng.standard_normal()).collect();
    let b: Vec<f64> = (0..10_000).map(|_| rng.standard_normal()).collect();
    assert!((auroc(&a, &b).unwrap() - 0.5).abs() < 0.01);
}

#[test]
fn detection_matches_brute_force() {
    let mut rng = RngStream::new(12, 0);
    for _ in 0..50 {
        // Rounded scores force ties.
        let id: Vec<f64> = (0..5).map(|_| (rng.uniform() * 6.0).round()).collect();
        let ood: Vec<f64> = (0..5).map(|_| (rng.uniform() * 6.0 + 1.0).round()).collect();
        assert!((auroc(&id, &ood).unwrap() - auroc_pairs(&id, &ood)).abs() < 1e-9);
        assert!((auprc(&id, &ood).unwrap() - auprc_sweep(&id, &ood)).abs() < 1e-9);
    }
    assert_eq!(auprc(&[0.1, 0.2], &[0.3, 0.4]).unwrap(), 1.0);
    assert!((auprc(&[0.5; 3], &[0.5; 3]).unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn signal_worked_examples() {
    assert_eq!(gate_entropy(&[0.0, 1.0, 0.0]), 0.0);
    assert!((gate_entropy(&[1.0 / 40.0; 40]) - 40f64.ln()).abs() < 1e-12);
    let eye = GaussianPosterior::cholesky(vec![0.0; 5], Tensor::identity(5)).unwrap();
    assert_eq!(inf_logit_var(&eye), 5.0);
    let diag = GaussianPosterior::diagonal(vec![0.0; 2], vec![2.0, 3.0]).unwrap();
    assert_eq!(inf_logit_var(&diag), 13.0);
    let l = Tensor::matrix(3, 3, vec![1.5, 0.0, 0.0, -0.4, 0.7, 0.0, 0.2, 0.9, 1.1]).unwrap();
    let llt = l.matmul(&l.transpose().unwrap()).unwrap();
    let trace: f64 = (0..3).map(|i| llt.get2(i, i)).sum();
    let post = GaussianPosterior::cholesky(vec![0.0; 3], l).unwrap();
    assert!((inf_logit_var(&post) - trace).abs() < 1e-12);
    assert_eq!(mc_logit_var(&[vec![1.0, 2.0], vec![1.0, 2.0]]), 0.0);
    assert_eq!(mc_logit_var(&[vec![0.0, 0.0], vec![2.0, 0.0]]), 2.0);
    assert_eq!(mc_logit_var(&[vec![0.0, 0.0], vec![4.0, 0.0]]), 8.0);
    let a: Vec<usize> = (0..8).collect();
    let b: Vec<usize> = (4..12).collect();
    assert!((jaccard(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(jaccard(&a, &a), 1.0);
    assert_eq!(jaccard(&[0, 1], &[2, 3]), 0.0);
}
